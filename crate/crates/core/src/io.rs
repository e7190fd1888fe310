//! Readers and writers for embedding matrices, sample-id sidecars and label
//! files.
//!
//! Supported matrix formats:
//! - `npy`: NumPy array file, version 1.0 (2.0 is also read), little-endian
//!   `<f4` or `<f8`, C order, two dimensions.
//! - `csv`: one row per sample, comma separated, no header unless requested.
//! - `rawf32`: bare little-endian row-major `f32` data with a JSON sidecar
//!   `<file>.json` holding `{"n": N, "d": D}`.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::embedding::{default_ids, EmbeddingSet, LabelSet, Precision};
use crate::error::{Error, Result};

const NPY_MAGIC: &[u8] = b"\x93NUMPY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Npy,
    Csv,
    Rawf32,
}

impl Format {
    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "npy" => Some(Format::Npy),
            "csv" | "txt" => Some(Format::Csv),
            "f32" | "bin" | "raw" | "rawf32" => Some(Format::Rawf32),
            _ => None,
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "npy" => Ok(Format::Npy),
            "csv" => Ok(Format::Csv),
            "rawf32" | "f32" | "raw" => Ok(Format::Rawf32),
            other => Err(Error::InvalidParameter(format!("unknown format {other:?}"))),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Npy => "npy",
            Format::Csv => "csv",
            Format::Rawf32 => "rawf32",
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// First CSV line is a header and is skipped.
    pub csv_header: bool,
    /// Newline-delimited sample ids, one per row.
    pub ids_path: Option<PathBuf>,
}

pub fn load_embeddings(path: &Path, format: Format, model_tag: &str) -> Result<EmbeddingSet> {
    load_embeddings_with(path, format, model_tag, &LoadOptions::default())
}

pub fn load_embeddings_with(
    path: &Path,
    format: Format,
    model_tag: &str,
    options: &LoadOptions,
) -> Result<EmbeddingSet> {
    let (matrix, precision) = match format {
        Format::Npy => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            parse_npy(&bytes)?
        }
        Format::Csv => {
            let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
            (parse_csv(file, options.csv_header)?, Precision::F64)
        }
        Format::Rawf32 => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            let sidecar = rawf32_sidecar(path);
            let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
            let shape: RawShape = serde_json::from_str(&text)?;
            (parse_rawf32(&bytes, shape.n, shape.d)?, Precision::F32)
        }
    };
    let ids = match &options.ids_path {
        Some(p) => read_ids(p)?,
        None => default_ids(matrix.nrows()),
    };
    Ok(EmbeddingSet::new(model_tag, ids, matrix)?.with_precision(precision))
}

pub fn save_embeddings(set: &EmbeddingSet, path: &Path, format: Format) -> Result<()> {
    let bytes = match format {
        Format::Npy => encode_npy(set.matrix(), set.precision()),
        Format::Csv => encode_csv(set.matrix()),
        Format::Rawf32 => {
            let shape = RawShape {
                n: set.len(),
                d: set.dim(),
            };
            let sidecar = rawf32_sidecar(path);
            fs::write(&sidecar, serde_json::to_vec(&shape)?).map_err(|e| Error::io(&sidecar, e))?;
            encode_rawf32(set.matrix())
        }
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Sidecar holding the shape of a rawf32 file: `<path>.json`.
pub fn rawf32_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Debug, Serialize, Deserialize)]
struct RawShape {
    n: usize,
    d: usize,
}

// ---------------------------------------------------------------- npy

pub fn parse_npy(bytes: &[u8]) -> Result<(Array2<f64>, Precision)> {
    let malformed = |offset: usize, reason: &str| Error::MalformedHeader {
        offset,
        reason: reason.to_string(),
    };
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(malformed(0, "missing \\x93NUMPY magic"));
    }
    let (header_len, header_start) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => {
            if bytes.len() < 12 {
                return Err(malformed(8, "truncated header length"));
            }
            let len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
            (len, 12)
        }
        v => return Err(malformed(6, &format!("unsupported version {v}"))),
    };
    let data_start = header_start + header_len;
    if bytes.len() < data_start {
        return Err(malformed(header_start, "header extends past end of file"));
    }
    let header = std::str::from_utf8(&bytes[header_start..data_start])
        .map_err(|_| malformed(header_start, "header is not valid text"))?;

    let field = |key: &str| -> Result<&str> {
        let pat = format!("'{key}':");
        let pos = header
            .find(&pat)
            .ok_or_else(|| malformed(header_start, &format!("missing key {key:?}")))?;
        Ok(header[pos + pat.len()..].trim_start())
    };

    let descr = field("descr")?;
    let precision = if descr.starts_with("'<f4'") {
        Precision::F32
    } else if descr.starts_with("'<f8'") {
        Precision::F64
    } else {
        return Err(malformed(header_start, "descr must be '<f4' or '<f8'"));
    };
    if !field("fortran_order")?.starts_with("False") {
        return Err(malformed(header_start, "only C-order arrays are supported"));
    }
    let shape = field("shape")?;
    let close = shape
        .find(')')
        .filter(|_| shape.starts_with('('))
        .ok_or_else(|| malformed(header_start, "shape is not a tuple"))?;
    let dims = shape[1..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.trim_end_matches('L').parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| malformed(header_start, "shape entries must be integers"))?;
    let [n, d] = dims[..] else {
        return Err(malformed(header_start, "array must be two-dimensional"));
    };
    if n == 0 {
        return Err(Error::NoRows);
    }
    if d == 0 {
        return Err(Error::ZeroDimension);
    }

    let width = match precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let payload = &bytes[data_start..];
    if payload.len() != n * d * width {
        return Err(Error::SizeMismatch {
            expected: n * d * width,
            found: payload.len(),
        });
    }
    let values: Vec<f64> = match precision {
        Precision::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        Precision::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
    };
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue {
            row: i / d,
            col: i % d,
        });
    }
    let matrix = Array2::from_shape_vec((n, d), values).expect("length checked above");
    Ok((matrix, precision))
}

pub fn encode_npy(matrix: ndarray::ArrayView2<'_, f64>, precision: Precision) -> Vec<u8> {
    let (n, d) = matrix.dim();
    let descr = match precision {
        Precision::F32 => "<f4",
        Precision::F64 => "<f8",
    };
    let mut header =
        format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': ({n}, {d}), }}");
    // magic(6) + version(2) + len(2) + header + '\n' padded to 64 bytes
    let unpadded = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');

    let mut out = Vec::with_capacity(10 + header.len() + n * d * 8);
    out.extend_from_slice(NPY_MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for &v in matrix.iter() {
        match precision {
            Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

// ---------------------------------------------------------------- csv

pub fn parse_csv<R: std::io::Read>(reader: R, has_header: bool) -> Result<Array2<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (row, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::MalformedHeader {
            offset: e.position().map_or(0, |p| p.byte() as usize),
            reason: e.to_string(),
        })?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(Error::RaggedRow {
                row,
                expected,
                found: record.len(),
            });
        }
        for (col, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::ParseValue {
                row,
                col,
                value: field.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFiniteValue { row, col });
            }
            values.push(v);
        }
        rows += 1;
    }
    let d = width.ok_or(Error::NoRows)?;
    if d == 0 {
        return Err(Error::ZeroDimension);
    }
    Ok(Array2::from_shape_vec((rows, d), values).expect("rows have uniform width"))
}

pub fn encode_csv(matrix: ndarray::ArrayView2<'_, f64>) -> Vec<u8> {
    let mut out = String::new();
    for row in matrix.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out.into_bytes()
}

// ---------------------------------------------------------------- rawf32

pub fn parse_rawf32(bytes: &[u8], n: usize, d: usize) -> Result<Array2<f64>> {
    if n == 0 {
        return Err(Error::NoRows);
    }
    if d == 0 {
        return Err(Error::ZeroDimension);
    }
    if bytes.len() != n * d * 4 {
        return Err(Error::SizeMismatch {
            expected: n * d * 4,
            found: bytes.len(),
        });
    }
    let mut values = Vec::with_capacity(n * d);
    for (i, c) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if !v.is_finite() {
            return Err(Error::NonFiniteValue {
                row: i / d,
                col: i % d,
            });
        }
        values.push(v as f64);
    }
    Ok(Array2::from_shape_vec((n, d), values).expect("length checked above"))
}

pub fn encode_rawf32(matrix: ndarray::ArrayView2<'_, f64>) -> Vec<u8> {
    matrix
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect()
}

// ---------------------------------------------------------------- ids and labels

pub fn read_ids(path: &Path) -> Result<Vec<String>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut ids = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let id = line.trim();
        if !id.is_empty() {
            ids.push(id.to_string());
        }
    }
    Ok(ids)
}

pub fn write_ids(path: &Path, ids: &[String]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for id in ids {
        writeln!(f, "{id}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Reads a label file. Either one integer per line (ids are the line
/// numbers `"0".."N-1"`) or two comma-separated columns `id,label`. A first
/// line whose label column is not an integer is treated as a header.
pub fn load_labels(path: &Path) -> Result<LabelSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text)
}

pub fn parse_labels(text: &str) -> Result<LabelSet> {
    let lines: Vec<&str> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    let two_column = lines.first().is_some_and(|l| l.contains(','));
    let mut ids = Vec::with_capacity(lines.len());
    let mut labels = Vec::with_capacity(lines.len());
    for (row, line) in lines.iter().enumerate() {
        let (id, field) = if two_column {
            let mut parts = line.splitn(2, ',');
            let id = parts.next().unwrap_or("").trim();
            let field = parts.next().ok_or(Error::RaggedRow {
                row,
                expected: 2,
                found: 1,
            })?;
            (id.to_string(), field.trim())
        } else {
            (labels.len().to_string(), *line)
        };
        match field.parse::<usize>() {
            Ok(l) => {
                ids.push(id);
                labels.push(l);
            }
            Err(_) if row == 0 && two_column => continue,
            Err(_) => {
                return Err(Error::ParseValue {
                    row,
                    col: usize::from(two_column),
                    value: field.to_string(),
                })
            }
        }
    }
    LabelSet::new(ids, labels)
}

pub fn write_labels(path: &Path, labels: &LabelSet) -> Result<()> {
    let mut out = String::from("id,label\n");
    for (id, l) in labels.sample_ids().iter().zip(labels.labels()) {
        out.push_str(&format!("{id},{l}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn csv_basic() {
        let m = parse_csv("1,0\n0,1\n1,1".as_bytes(), false).unwrap();
        assert_eq!(m.dim(), (3, 2));
        assert_eq!(m, array![[1., 0.], [0., 1.], [1., 1.]]);
    }

    #[test]
    fn csv_header_and_errors() {
        let m = parse_csv("a,b\n1,2\n".as_bytes(), true).unwrap();
        assert_eq!(m, array![[1., 2.]]);
        assert!(matches!(
            parse_csv("1,NaN".as_bytes(), false),
            Err(Error::NonFiniteValue { row: 0, col: 1 })
        ));
        assert!(matches!(
            parse_csv("1,2\n3\n".as_bytes(), false),
            Err(Error::RaggedRow {
                row: 1,
                expected: 2,
                found: 1
            })
        ));
        assert!(matches!(
            parse_csv("1,x".as_bytes(), false),
            Err(Error::ParseValue { row: 0, col: 1, .. })
        ));
        assert!(matches!(
            parse_csv("".as_bytes(), false),
            Err(Error::NoRows)
        ));
    }

    #[test]
    fn npy_rejects_bad_headers() {
        assert!(matches!(
            parse_npy(b"NOTNUMPY00"),
            Err(Error::MalformedHeader { offset: 0, .. })
        ));
        let mut bytes = encode_npy(array![[1.0, 2.0]].view(), Precision::F64);
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(parse_npy(&bytes), Err(Error::SizeMismatch { .. })));
        let one_d = encode_npy(array![[1.0]].view(), Precision::F64);
        let text = String::from_utf8_lossy(&one_d).replace("(1, 1)", "(1,)   ");
        assert!(matches!(
            parse_npy(text.as_bytes()),
            Err(Error::MalformedHeader { .. })
        ));
    }

    #[test]
    fn npy_header_is_aligned() {
        let bytes = encode_npy(array![[1.0, 2.0, 3.0]].view(), Precision::F32);
        let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + header_len) % 64, 0);
        assert_eq!(bytes[10 + header_len - 1], b'\n');
    }

    #[test]
    fn rawf32_rejects_nan() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            parse_rawf32(&bytes, 1, 2),
            Err(Error::NonFiniteValue { row: 0, col: 1 })
        ));
        assert!(matches!(
            parse_rawf32(&bytes, 1, 3),
            Err(Error::SizeMismatch { .. })
        ));
    }

    #[test]
    fn labels_both_layouts() {
        let l = parse_labels("2\n0\n1\n").unwrap();
        assert_eq!(l.labels(), &[2, 0, 1]);
        assert_eq!(l.sample_ids()[2], "2");
        let l = parse_labels("id,label\nimg_b,1\nimg_a,0\n").unwrap();
        assert_eq!(l.sample_ids(), &["img_b".to_string(), "img_a".to_string()]);
        assert_eq!(l.labels(), &[1, 0]);
        assert!(parse_labels("1\n-3\n").is_err());
    }

    #[test]
    fn format_parsing() {
        assert_eq!("NPY".parse::<Format>().unwrap(), Format::Npy);
        assert_eq!(Format::from_path(Path::new("x.f32")), Some(Format::Rawf32));
        assert!("parquet".parse::<Format>().is_err());
    }
}
