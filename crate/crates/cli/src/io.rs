//! CSV tables and raster previews.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};

/// Numeric CSV table with a mandatory header row.
#[derive(Debug, Clone)]
pub struct Table {
    pub path: PathBuf,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// Source line of each row, for error messages.
    pub lines: Vec<u64>,
}

impl Table {
    pub fn read(path: &Path) -> CliResult<Self> {
        let file = File::open(path).map_err(|e| CliError::io(path, e))?;
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?
            .iter()
            .map(str::to_string)
            .collect();
        if headers.iter().all(|h| h.is_empty()) {
            return Err(CliError::data(format!("{}: missing header row", path.display())));
        }
        let mut rows = Vec::new();
        let mut lines = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
            let line = rec.position().map_or(0, |p| p.line());
            let row = rec
                .iter()
                .zip(&headers)
                .map(|(v, h)| {
                    v.parse::<f64>().map_err(|_| {
                        CliError::data(format!("{} line {line}: column `{h}`: `{v}` is not a number", path.display()))
                    })
                })
                .collect::<CliResult<Vec<f64>>>()?;
            rows.push(row);
            lines.push(line);
        }
        Ok(Self { path: path.to_path_buf(), headers, rows, lines })
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    pub fn column(&self, name: &str) -> CliResult<usize> {
        self.position(name)
            .ok_or_else(|| CliError::config(format!("{}: no column named `{name}`", self.path.display())))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `path line N` for row `k`.
    pub fn at(&self, k: usize) -> String {
        format!("{} line {}", self.path.display(), self.lines[k])
    }

    pub fn non_empty(self) -> CliResult<Self> {
        if self.is_empty() {
            return Err(CliError::data(format!("{}: no data rows", self.path.display())));
        }
        Ok(self)
    }
}

pub fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

pub fn csv_writer(path: &Path) -> CliResult<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

pub fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::config(format!("{}: {e}", path.display()))
}

/// Writes a numeric table; values use the shortest representation that
/// parses back to the same number.
pub fn write_table(path: &Path, headers: &[&str], rows: impl Iterator<Item = Vec<f64>>) -> CliResult<()> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    w.write_record(headers).map_err(&err)?;
    for row in rows {
        w.write_record(row.iter().map(|v| format!("{v:?}"))).map_err(&err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

/// 8-bit greyscale PGM of `values` placed at integer `(column, row)` cells,
/// linearly stretched between the minimum and maximum. Row 0 is drawn at
/// the bottom; cells without a value are black.
pub fn write_pgm(path: &Path, cells: &[(i64, i64)], values: &[f64]) -> CliResult<()> {
    let (Some(x0), Some(y0)) = (cells.iter().map(|c| c.0).min(), cells.iter().map(|c| c.1).min()) else {
        return Ok(());
    };
    let width = (cells.iter().map(|c| c.0).max().unwrap() - x0 + 1) as usize;
    let height = (cells.iter().map(|c| c.1).max().unwrap() - y0 + 1) as usize;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut pixels = vec![0u8; width * height];
    for (&(x, y), &v) in cells.iter().zip(values) {
        let row = height - 1 - (y - y0) as usize;
        pixels[row * width + (x - x0) as usize] = (255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8;
    }
    let mut w = create(path)?;
    write!(w, "P5\n{width} {height}\n255\n")
        .and_then(|_| w.write_all(&pixels))
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(path, e))
}
