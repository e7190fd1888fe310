//! Report types and their JSON / CSV serialization.
//!
//! Floats are written with 17 significant digits so every `f64` survives a
//! write/read cycle exactly. Non-finite values are refused rather than being
//! written as `null` or `NaN` text.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::InvalidParameter(format!(
                "unknown report format {other:?}"
            ))),
        }
    }
}

/// Symmetric model-by-model score matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseReport {
    metric_name: String,
    model_tags: Vec<String>,
    matrix: Vec<Vec<f64>>,
    params: BTreeMap<String, Value>,
    created_at: String,
}

impl PairwiseReport {
    pub fn new(
        metric_name: impl Into<String>,
        model_tags: Vec<String>,
        matrix: Array2<f64>,
    ) -> Self {
        assert_eq!(matrix.dim(), (model_tags.len(), model_tags.len()));
        Self {
            metric_name: metric_name.into(),
            model_tags,
            matrix: matrix.rows().into_iter().map(|r| r.to_vec()).collect(),
            params: BTreeMap::new(),
            created_at: timestamp(),
        }
    }

    pub fn metric_name(&self) -> &str {
        &self.metric_name
    }

    pub fn model_tags(&self) -> &[String] {
        &self.model_tags
    }

    pub fn matrix(&self) -> Array2<f64> {
        let m = self.model_tags.len();
        Array2::from_shape_fn((m, m), |(i, j)| self.matrix[i][j])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i][j]
    }

    pub fn params(&self) -> &BTreeMap<String, Value> {
        &self.params
    }

    pub fn set_param(&mut self, key: &str, value: impl Into<Value>) {
        self.params.insert(key.to_string(), value.into());
    }

    pub fn created_at(&self) -> &str {
        &self.created_at
    }

    pub fn with_created_at(mut self, created_at: impl Into<String>) -> Self {
        self.created_at = created_at.into();
        self
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let m = self.model_tags.len();
        (0..m).all(|i| (0..m).all(|j| (self.matrix[i][j] - self.matrix[j][i]).abs() <= tol))
    }

    fn check_finite(&self) -> Result<()> {
        for (i, row) in self.matrix.iter().enumerate() {
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteReport(format!(
                    "{} cell ({}, {})",
                    self.metric_name, self.model_tags[i], self.model_tags[j]
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        self.check_finite()?;
        to_json_string(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Matrix with a header row and header column of model tags.
    pub fn to_csv(&self) -> Result<String> {
        self.check_finite()?;
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let header = std::iter::once(String::new()).chain(self.model_tags.iter().cloned());
        wtr.write_record(header).map_err(csv_error)?;
        for (tag, row) in self.model_tags.iter().zip(&self.matrix) {
            let cells = std::iter::once(tag.clone()).chain(row.iter().map(|&v| format_g17(v)));
            wtr.write_record(cells).map_err(csv_error)?;
        }
        let bytes = wtr
            .into_inner()
            .map_err(|e| csv_error(e.into_error().into()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn emit(&self, path: &Path, format: ReportFormat) -> Result<()> {
        let text = match format {
            ReportFormat::Json => self.to_json()?,
            ReportFormat::Csv => self.to_csv()?,
        };
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::io("<csv>", io::Error::other(e.to_string()))
}

pub fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// `%.17g`-style rendering: 17 significant digits, trailing zeros trimmed.
pub fn format_g17(v: f64) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() {
            "-0".into()
        } else {
            "0".into()
        };
    }
    let sci = format!("{v:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..17).contains(&exp) {
        let decimals = (16 - exp).max(0) as usize;
        trim_zeros(&format!("{v:.decimals$}")).to_string()
    } else {
        format!(
            "{}e{}{:02}",
            trim_zeros(mantissa),
            if exp < 0 { '-' } else { '+' },
            exp.abs()
        )
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// JSON formatter that writes floats with [`format_g17`] and fails on
/// non-finite values.
struct G17Formatter(serde_json::ser::PrettyFormatter<'static>);

impl serde_json::ser::Formatter for G17Formatter {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        if !value.is_finite() {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                "non-finite float",
            ));
        }
        let mut s = format_g17(value);
        if !s.contains(['.', 'e']) {
            s.push_str(".0");
        }
        writer.write_all(s.as_bytes())
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + io::Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + io::Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Pretty JSON with 17-digit floats. Any non-finite float is an error.
pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    finite::check(value)?;
    let mut out = Vec::new();
    let formatter = G17Formatter(serde_json::ser::PrettyFormatter::new());
    let mut ser = serde_json::Serializer::with_formatter(&mut out, formatter);
    value.serialize(&mut ser).map_err(|e| {
        if e.is_io() {
            Error::NonFiniteReport(e.to_string())
        } else {
            Error::Json(e)
        }
    })?;
    out.push(b'\n');
    Ok(String::from_utf8(out).expect("json output is utf-8"))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = to_json_string(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn report() -> PairwiseReport {
        let mut r = PairwiseReport::new(
            "linear_cka",
            vec!["a".into(), "b".into()],
            array![[1.0, 0.1], [0.1, 1.0]],
        );
        r.set_param("k", 10);
        r
    }

    #[test]
    fn g17_rendering() {
        assert_eq!(format_g17(0.1), "0.10000000000000001");
        assert_eq!(format_g17(1.0), "1");
        assert_eq!(format_g17(-8.0), "-8");
        assert_eq!(format_g17(1e-300), "1e-300");
        assert_eq!(format_g17(1.5e20), "1.5e+20");
        assert_eq!(format_g17(123456.5), "123456.5");
        for v in [
            0.1,
            1.0 / 3.0,
            -2.5e-7,
            6.02e23,
            f64::MIN_POSITIVE,
            0.7280000000000001,
        ] {
            assert_eq!(format_g17(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn json_round_trip() {
        let r = report();
        let back = PairwiseReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn csv_grid_has_headers() {
        let text = report().to_csv().unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], ",a,b");
        assert_eq!(lines[1].split(',').count(), 3);
        assert!(lines[1].starts_with("a,1,"));
    }

    #[test]
    fn nan_is_refused() {
        let r = PairwiseReport::new("x", vec!["a".into()], array![[f64::NAN]]);
        assert!(matches!(r.to_json(), Err(Error::NonFiniteReport(_))));
        assert!(matches!(r.to_csv(), Err(Error::NonFiniteReport(_))));
        #[derive(Serialize)]
        struct S {
            v: f64,
        }
        assert!(matches!(
            to_json_string(&S { v: f64::INFINITY }),
            Err(Error::NonFiniteReport(_))
        ));
    }
}

/// serde_json writes non-finite floats as `null` without consulting the
/// formatter, so they are caught by walking the value first.
mod finite {
    use serde::ser::{self, Serialize};

    use crate::error::Error;

    #[derive(Debug)]
    pub struct Found(String);

    impl std::fmt::Display for Found {
        fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
            f.write_str(&self.0)
        }
    }

    impl std::error::Error for Found {}

    impl ser::Error for Found {
        fn custom<T: std::fmt::Display>(msg: T) -> Self {
            Found(msg.to_string())
        }
    }

    pub fn check<T: Serialize + ?Sized>(value: &T) -> Result<(), Error> {
        value
            .serialize(Checker)
            .map_err(|Found(msg)| Error::NonFiniteReport(msg))
    }

    struct Checker;

    type R = Result<(), Found>;

    fn float(v: f64) -> R {
        if v.is_finite() {
            Ok(())
        } else {
            Err(Found(format!("value {v}")))
        }
    }

    impl ser::Serializer for Checker {
        type Ok = ();
        type Error = Found;
        type SerializeSeq = Checker;
        type SerializeTuple = Checker;
        type SerializeTupleStruct = Checker;
        type SerializeTupleVariant = Checker;
        type SerializeMap = Checker;
        type SerializeStruct = Checker;
        type SerializeStructVariant = Checker;

        fn serialize_bool(self, _: bool) -> R {
            Ok(())
        }
        fn serialize_i8(self, _: i8) -> R {
            Ok(())
        }
        fn serialize_i16(self, _: i16) -> R {
            Ok(())
        }
        fn serialize_i32(self, _: i32) -> R {
            Ok(())
        }
        fn serialize_i64(self, _: i64) -> R {
            Ok(())
        }
        fn serialize_u8(self, _: u8) -> R {
            Ok(())
        }
        fn serialize_u16(self, _: u16) -> R {
            Ok(())
        }
        fn serialize_u32(self, _: u32) -> R {
            Ok(())
        }
        fn serialize_u64(self, _: u64) -> R {
            Ok(())
        }
        fn serialize_f32(self, v: f32) -> R {
            float(v as f64)
        }
        fn serialize_f64(self, v: f64) -> R {
            float(v)
        }
        fn serialize_char(self, _: char) -> R {
            Ok(())
        }
        fn serialize_str(self, _: &str) -> R {
            Ok(())
        }
        fn serialize_bytes(self, _: &[u8]) -> R {
            Ok(())
        }
        fn serialize_none(self) -> R {
            Ok(())
        }
        fn serialize_some<T: ?Sized + Serialize>(self, v: &T) -> R {
            v.serialize(self)
        }
        fn serialize_unit(self) -> R {
            Ok(())
        }
        fn serialize_unit_struct(self, _: &'static str) -> R {
            Ok(())
        }
        fn serialize_unit_variant(self, _: &'static str, _: u32, _: &'static str) -> R {
            Ok(())
        }
        fn serialize_newtype_struct<T: ?Sized + Serialize>(self, _: &'static str, v: &T) -> R {
            v.serialize(self)
        }
        fn serialize_newtype_variant<T: ?Sized + Serialize>(
            self,
            _: &'static str,
            _: u32,
            _: &'static str,
            v: &T,
        ) -> R {
            v.serialize(self)
        }
        fn serialize_seq(self, _: Option<usize>) -> Result<Checker, Found> {
            Ok(Checker)
        }
        fn serialize_tuple(self, _: usize) -> Result<Checker, Found> {
            Ok(Checker)
        }
        fn serialize_tuple_struct(self, _: &'static str, _: usize) -> Result<Checker, Found> {
            Ok(Checker)
        }
        fn serialize_tuple_variant(
            self,
            _: &'static str,
            _: u32,
            _: &'static str,
            _: usize,
        ) -> Result<Checker, Found> {
            Ok(Checker)
        }
        fn serialize_map(self, _: Option<usize>) -> Result<Checker, Found> {
            Ok(Checker)
        }
        fn serialize_struct(self, _: &'static str, _: usize) -> Result<Checker, Found> {
            Ok(Checker)
        }
        fn serialize_struct_variant(
            self,
            _: &'static str,
            _: u32,
            _: &'static str,
            _: usize,
        ) -> Result<Checker, Found> {
            Ok(Checker)
        }
    }

    impl ser::SerializeSeq for Checker {
        type Ok = ();
        type Error = Found;
        fn serialize_element<T: ?Sized + Serialize>(&mut self, v: &T) -> R {
            v.serialize(Checker)
        }
        fn end(self) -> R {
            Ok(())
        }
    }

    impl ser::SerializeTuple for Checker {
        type Ok = ();
        type Error = Found;
        fn serialize_element<T: ?Sized + Serialize>(&mut self, v: &T) -> R {
            v.serialize(Checker)
        }
        fn end(self) -> R {
            Ok(())
        }
    }

    impl ser::SerializeTupleStruct for Checker {
        type Ok = ();
        type Error = Found;
        fn serialize_field<T: ?Sized + Serialize>(&mut self, v: &T) -> R {
            v.serialize(Checker)
        }
        fn end(self) -> R {
            Ok(())
        }
    }

    impl ser::SerializeTupleVariant for Checker {
        type Ok = ();
        type Error = Found;
        fn serialize_field<T: ?Sized + Serialize>(&mut self, v: &T) -> R {
            v.serialize(Checker)
        }
        fn end(self) -> R {
            Ok(())
        }
    }

    impl ser::SerializeMap for Checker {
        type Ok = ();
        type Error = Found;
        fn serialize_key<T: ?Sized + Serialize>(&mut self, k: &T) -> R {
            k.serialize(Checker)
        }
        fn serialize_value<T: ?Sized + Serialize>(&mut self, v: &T) -> R {
            v.serialize(Checker)
        }
        fn end(self) -> R {
            Ok(())
        }
    }

    impl ser::SerializeStruct for Checker {
        type Ok = ();
        type Error = Found;
        fn serialize_field<T: ?Sized + Serialize>(&mut self, key: &'static str, v: &T) -> R {
            v.serialize(Checker)
                .map_err(|Found(m)| Found(format!("{key}: {m}")))
        }
        fn end(self) -> R {
            Ok(())
        }
    }

    impl ser::SerializeStructVariant for Checker {
        type Ok = ();
        type Error = Found;
        fn serialize_field<T: ?Sized + Serialize>(&mut self, key: &'static str, v: &T) -> R {
            v.serialize(Checker)
                .map_err(|Found(m)| Found(format!("{key}: {m}")))
        }
        fn end(self) -> R {
            Ok(())
        }
    }
}
