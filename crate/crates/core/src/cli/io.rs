//! Dense matrix files: CSV (one row per line, optional `# rows cols` header)
//! and MatrixMarket `array real general`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum MatrixFormat {
    Csv,
    #[value(name = "mm")]
    MatrixMarket,
}

impl MatrixFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            MatrixFormat::Csv => "csv",
            MatrixFormat::MatrixMarket => "mtx",
        }
    }

    /// MatrixMarket for `.mtx`/`.mm`, CSV otherwise.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("mtx") | Some("mm") => MatrixFormat::MatrixMarket,
            _ => MatrixFormat::Csv,
        }
    }
}

fn parse_err(path: &str, msg: impl Into<String>) -> IoError {
    IoError::Parse { path: path.to_string(), msg: msg.into() }
}

fn parse_f64(path: &str, s: &str) -> Result<f64, IoError> {
    s.trim().parse::<f64>().map_err(|_| parse_err(path, format!("invalid number {:?}", s.trim())))
}

/// Parses CSV text. An optional first line `# rows cols` fixes the shape;
/// it may declare `0 cols` rows for empty blocks.
pub fn parse_csv(text: &str, path: &str) -> Result<DMatrix<f64>, IoError> {
    let mut declared = None;
    if let Some(first) = text.lines().next() {
        if let Some(rest) = first.trim_start().strip_prefix('#') {
            let nums: Vec<&str> = rest.split_whitespace().collect();
            if nums.len() != 2 {
                return Err(parse_err(path, "header must read `# rows cols`"));
            }
            let r = nums[0].parse::<usize>().map_err(|_| parse_err(path, "bad row count in header"))?;
            let c = nums[1].parse::<usize>().map_err(|_| parse_err(path, "bad column count in header"))?;
            declared = Some((r, c));
        }
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { expected_len, len, pos } => parse_err(
                path,
                format!(
                    "ragged row at line {}: {len} fields, expected {expected_len}",
                    pos.as_ref().map(|p| p.line()).unwrap_or(0)
                ),
            ),
            _ => parse_err(path, e.to_string()),
        })?;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        rows.push(rec.iter().map(|f| parse_f64(path, f)).collect::<Result<_, _>>()?);
    }
    let (r, c) = (rows.len(), rows.first().map_or(0, Vec::len));
    if let Some((dr, dc)) = declared {
        if r == 0 && (dr == 0 || dc == 0) {
            return Ok(DMatrix::zeros(dr, dc));
        }
        if (dr, dc) != (r, c) {
            return Err(parse_err(path, format!("header declares {dr}x{dc} but data is {r}x{c}")));
        }
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// Parses MatrixMarket `array real general` (column-major values).
pub fn parse_matrix_market(text: &str, path: &str) -> Result<DMatrix<f64>, IoError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err(path, "empty file"))?;
    let words: Vec<String> = header.split_whitespace().map(str::to_ascii_lowercase).collect();
    if words.len() < 5 || words[0] != "%%matrixmarket" || words[1] != "matrix" {
        return Err(parse_err(path, "missing %%MatrixMarket matrix header"));
    }
    if words[2] != "array" || words[3] != "real" || words[4] != "general" {
        return Err(parse_err(path, "only `array real general` is supported"));
    }
    let mut body = lines.map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('%'));
    let size = body.next().ok_or_else(|| parse_err(path, "missing size line"))?;
    let dims: Vec<usize> = size
        .split_whitespace()
        .map(|s| s.parse::<usize>().map_err(|_| parse_err(path, "bad size line")))
        .collect::<Result<_, _>>()?;
    if dims.len() != 2 {
        return Err(parse_err(path, "size line must be `rows cols`"));
    }
    let values: Vec<f64> = body.map(|l| parse_f64(path, l)).collect::<Result<_, _>>()?;
    if values.len() != dims[0] * dims[1] {
        return Err(parse_err(path, format!("expected {} values, found {}", dims[0] * dims[1], values.len())));
    }
    Ok(DMatrix::from_column_slice(dims[0], dims[1], &values))
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>, IoError> {
    let name = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| IoError::Read { path: name.clone(), source })?;
    match MatrixFormat::from_path(path) {
        MatrixFormat::Csv => parse_csv(&text, &name),
        MatrixFormat::MatrixMarket => parse_matrix_market(&text, &name),
    }
}

/// CSV with a `# rows cols` header; values in shortest round-trip form.
pub fn format_csv(m: &DMatrix<f64>) -> String {
    let mut out = format!("# {} {}\n", m.nrows(), m.ncols());
    for row in m.row_iter() {
        let fields: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn format_matrix_market(m: &DMatrix<f64>) -> String {
    let mut out = String::from("%%MatrixMarket matrix array real general\n");
    let _ = writeln!(out, "{} {}", m.nrows(), m.ncols());
    for v in m.iter() {
        let _ = writeln!(out, "{v:?}");
    }
    out
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>, format: MatrixFormat) -> Result<(), IoError> {
    let text = match format {
        MatrixFormat::Csv => format_csv(m),
        MatrixFormat::MatrixMarket => format_matrix_market(m),
    };
    fs::write(path, text).map_err(|source| IoError::Read { path: path.display().to_string(), source })
}
