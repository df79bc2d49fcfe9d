//! On-disk formats: vector datasets as CSV, matrix datasets as `.tlmx`
//! tensor containers, parameters as JSON, experiment records as CSV, and
//! the study manifest tying a generated study together.
//!
//! `.tlmx` layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//!      0     4  magic  b"TLMX"
//!      4     4  dtype  u32, 1 = f64 LE, 2 = f32 LE
//!      8     2  d1     u16, rows of each covariate
//!     10     2  d2     u16, columns of each covariate
//!     12     4  n      u32, observations
//!     16        n responses, then n covariates in column-major order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datagen::{GeneratedStudy, ScenarioConfig};
use crate::error::{Error, Result};
use crate::experiments::{Record, CSV_COLUMNS};
use crate::model::{Dataset, LossFamily, Parameter, Shape};

pub const TLMX_MAGIC: [u8; 4] = *b"TLMX";
pub const TLMX_HEADER_LEN: usize = 16;
pub const DTYPE_F64: u32 = 1;
pub const DTYPE_F32: u32 = 2;

/// Format version written into every JSON artifact.
pub const FORMAT_VERSION: u32 = 1;

// ---------------------------------------------------------------- datasets

/// Reads a `y,x1..xp` CSV into a vector dataset.
pub fn read_dataset_csv<R: Read>(reader: R, family: LossFamily) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let p = headers.len().saturating_sub(1);
    if p == 0 || &headers[0] != "y" {
        return Err(Error::Format("dataset CSV header must be y,x1,...,xp".into()));
    }
    for (j, h) in headers.iter().skip(1).enumerate() {
        if h != format!("x{}", j + 1) {
            return Err(Error::Format(format!("column {} is '{h}', expected 'x{}'", j + 2, j + 1)));
        }
    }
    let mut ys = Vec::new();
    let mut xs = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != p + 1 {
            return Err(Error::Format(format!("row {} has {} fields, expected {}", i + 1, rec.len(), p + 1)));
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Format(format!("row {}, column {}: '{field}' is not a number", i + 1, j + 1)))?;
            if j == 0 {
                ys.push(v);
            } else {
                xs.push(v);
            }
        }
    }
    if ys.is_empty() {
        return Err(Error::Format("dataset CSV has no rows".into()));
    }
    let design = DMatrix::from_row_slice(ys.len(), p, &xs);
    Dataset::vector(design, DVector::from_vec(ys), family)
}

pub fn write_dataset_csv<W: Write>(writer: W, d: &Dataset) -> Result<()> {
    if d.shape().is_matrix() {
        return Err(Error::invalid("CSV holds vector datasets; use .tlmx for matrix covariates"));
    }
    let mut w = csv::Writer::from_writer(writer);
    let p = d.shape().len();
    let mut header = vec!["y".to_string()];
    header.extend((1..=p).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    let x = d.design();
    for i in 0..d.n() {
        let mut row = Vec::with_capacity(p + 1);
        row.push(fmt_f64(d.responses()[i]));
        row.extend((0..p).map(|j| fmt_f64(x[(i, j)])));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn fmt_f64(v: f64) -> String {
    // shortest round-trip representation
    format!("{v:?}")
}

/// Decodes a `.tlmx` container into a matrix dataset.
pub fn decode_tlmx(bytes: &[u8], family: LossFamily) -> Result<Dataset> {
    if bytes.len() < TLMX_HEADER_LEN {
        return Err(Error::Format(format!("tlmx: {} bytes is shorter than the header", bytes.len())));
    }
    if bytes[..4] != TLMX_MAGIC {
        return Err(Error::Format("tlmx: bad magic".into()));
    }
    let dtype = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    let d1 = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let d2 = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
    let n = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let width = match dtype {
        DTYPE_F64 => 8,
        DTYPE_F32 => 4,
        other => return Err(Error::Format(format!("tlmx: unknown dtype {other}"))),
    };
    if d1 == 0 || d2 == 0 || n == 0 {
        return Err(Error::Format(format!("tlmx: empty dimensions d1={d1}, d2={d2}, n={n}")));
    }
    let count = (d1 * d2)
        .checked_add(1)
        .and_then(|per| per.checked_mul(n))
        .ok_or_else(|| Error::Format("tlmx: dimensions overflow".into()))?;
    let expected = count
        .checked_mul(width)
        .and_then(|b| b.checked_add(TLMX_HEADER_LEN))
        .ok_or_else(|| Error::Format("tlmx: dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!("tlmx: payload is {} bytes, expected {expected}", bytes.len())));
    }
    let payload = &bytes[TLMX_HEADER_LEN..];
    let values: Vec<f64> = if width == 8 {
        payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    } else {
        payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect()
    };
    let responses = DVector::from_column_slice(&values[..n]);
    let q = d1 * d2;
    let covariates: Vec<DMatrix<f64>> = values[n..]
        .chunks_exact(q)
        .map(|c| DMatrix::from_column_slice(d1, d2, c))
        .collect();
    Dataset::matrix(&covariates, responses, family)
}

/// Encodes a matrix dataset as `.tlmx` with f64 payload.
pub fn encode_tlmx(d: &Dataset) -> Result<Vec<u8>> {
    let (d1, d2) = match d.shape() {
        Shape::Matrix(a, b) => (a, b),
        Shape::Vector(_) => return Err(Error::invalid("tlmx holds matrix datasets; use CSV for vectors")),
    };
    let too_big = |what: &str| Error::invalid(format!("tlmx: {what} exceeds the header field"));
    let d1h = u16::try_from(d1).map_err(|_| too_big("d1"))?;
    let d2h = u16::try_from(d2).map_err(|_| too_big("d2"))?;
    let nh = u32::try_from(d.n()).map_err(|_| too_big("n"))?;
    let mut out = Vec::with_capacity(TLMX_HEADER_LEN + 8 * d.n() * (d1 * d2 + 1));
    out.extend_from_slice(&TLMX_MAGIC);
    out.extend_from_slice(&DTYPE_F64.to_le_bytes());
    out.extend_from_slice(&d1h.to_le_bytes());
    out.extend_from_slice(&d2h.to_le_bytes());
    out.extend_from_slice(&nh.to_le_bytes());
    for y in d.responses().iter() {
        out.extend_from_slice(&y.to_le_bytes());
    }
    let x = d.design();
    for i in 0..d.n() {
        for j in 0..d1 * d2 {
            out.extend_from_slice(&x[(i, j)].to_le_bytes());
        }
    }
    Ok(out)
}

/// Loads a dataset by extension: `.csv` or `.tlmx`.
pub fn load_dataset(path: &Path, family: LossFamily) -> Result<Dataset> {
    match extension(path).as_deref() {
        Some("csv") => read_dataset_csv(BufReader::new(File::open(path)?), family),
        Some("tlmx") => decode_tlmx(&std::fs::read(path)?, family),
        _ => Err(Error::Format(format!("{}: expected a .csv or .tlmx dataset", path.display()))),
    }
}

pub fn save_dataset(path: &Path, d: &Dataset) -> Result<()> {
    match extension(path).as_deref() {
        Some("csv") => write_dataset_csv(BufWriter::new(File::create(path)?), d),
        Some("tlmx") => Ok(std::fs::write(path, encode_tlmx(d)?)?),
        _ => Err(Error::Format(format!("{}: expected a .csv or .tlmx dataset", path.display()))),
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase())
}

/// Dataset file name for index `k` in a study directory.
pub fn dataset_file_name(k: usize, shape: Shape) -> String {
    if shape.is_matrix() {
        format!("dataset_{k}.tlmx")
    } else {
        format!("dataset_{k}.csv")
    }
}

// -------------------------------------------------------------- parameters

/// JSON form of a parameter: shape plus column-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterFile {
    pub shape: Shape,
    pub values: Vec<f64>,
}

impl From<&Parameter> for ParameterFile {
    fn from(p: &Parameter) -> Self {
        ParameterFile {
            shape: p.shape(),
            values: p.as_slice().to_vec(),
        }
    }
}

impl TryFrom<ParameterFile> for Parameter {
    type Error = Error;

    fn try_from(f: ParameterFile) -> Result<Parameter> {
        if f.shape.is_empty() {
            return Err(Error::Format("parameter shape has no coordinates".into()));
        }
        Parameter::from_column_major(f.shape, f.values)
    }
}

pub fn parse_parameter_json(text: &str) -> Result<Parameter> {
    let f: ParameterFile = serde_json::from_str(text)?;
    f.try_into()
}

pub fn parameter_json(p: &Parameter) -> Result<String> {
    Ok(serde_json::to_string_pretty(&ParameterFile::from(p))?)
}

// ---------------------------------------------------------------- records

pub fn write_records_csv<W: Write>(writer: W, records: &[Record]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(CSV_COLUMNS)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv<R: Read>(reader: R) -> Result<Vec<Record>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(CSV_COLUMNS) {
        return Err(Error::Format(format!(
            "records header must be {}",
            CSV_COLUMNS.join(",")
        )));
    }
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

// ------------------------------------------------------------------ study

/// `study.json` inside a generated-study directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyManifest {
    pub format_version: u32,
    pub family: LossFamily,
    pub shape: Shape,
    /// Target first; paths relative to the manifest.
    pub datasets: Vec<String>,
    #[serde(default)]
    pub true_coeffs: Option<Vec<ParameterFile>>,
    #[serde(default)]
    pub true_informative: Option<Vec<bool>>,
    #[serde(default)]
    pub scenario: Option<ScenarioConfig>,
}

pub const STUDY_MANIFEST: &str = "study.json";

/// Writes every dataset plus `study.json` into `dir`.
pub fn write_study(dir: &Path, study: &GeneratedStudy, scenario: Option<&ScenarioConfig>) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let first = study
        .datasets
        .first()
        .ok_or_else(|| Error::invalid("study has no datasets"))?;
    let shape = first.shape();
    let mut names = Vec::with_capacity(study.datasets.len());
    for (k, d) in study.datasets.iter().enumerate() {
        let name = dataset_file_name(k, shape);
        save_dataset(&dir.join(&name), d)?;
        names.push(name);
    }
    let manifest = StudyManifest {
        format_version: FORMAT_VERSION,
        family: first.family(),
        shape,
        datasets: names,
        true_coeffs: Some(study.true_coeffs.iter().map(ParameterFile::from).collect()),
        true_informative: Some(study.true_informative.clone()),
        scenario: scenario.cloned(),
    };
    let path = dir.join(STUDY_MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

/// Reads a study manifest (a file, or a directory containing `study.json`)
/// and its datasets.
pub fn read_study(path: &Path) -> Result<(StudyManifest, Vec<Dataset>)> {
    let file = if path.is_dir() { path.join(STUDY_MANIFEST) } else { path.to_path_buf() };
    let manifest: StudyManifest = serde_json::from_str(&std::fs::read_to_string(&file)?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported study format version {}", manifest.format_version)));
    }
    if manifest.datasets.is_empty() {
        return Err(Error::Format("study lists no datasets".into()));
    }
    let base = file.parent().unwrap_or(Path::new("."));
    let datasets = manifest
        .datasets
        .iter()
        .map(|name| {
            let d = load_dataset(&base.join(name), manifest.family)?;
            if d.shape() != manifest.shape {
                return Err(Error::ShapeMismatch {
                    expected: manifest.shape,
                    found: d.shape(),
                });
            }
            Ok(d)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, datasets))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vector_fixture() -> Dataset {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, -0.5, 0.1, 2.0, 1e-300, 3.25]);
        Dataset::vector(x, DVector::from_vec(vec![0.3, -1.0, 7.0]), LossFamily::SquaredIdentity).unwrap()
    }

    fn matrix_fixture() -> Dataset {
        let xs: Vec<DMatrix<f64>> = (0..3).map(|i| DMatrix::from_fn(2, 3, |r, c| (i * 6 + r * 3 + c) as f64 * 0.1)).collect();
        Dataset::matrix(&xs, DVector::from_vec(vec![1.0, 0.0, 1.0]), LossFamily::LogisticLogit).unwrap()
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let d = vector_fixture();
        let mut buf = Vec::new();
        write_dataset_csv(&mut buf, &d).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("y,x1,x2\n"));
        let back = read_dataset_csv(buf.as_slice(), LossFamily::SquaredIdentity).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn csv_rejects_bad_input() {
        for text in ["x1,y\n1,2\n", "y,x1\n1,abc\n", "y,x1\n", "y\n1\n", "y,x1\n1,2,3\n", "y,x2\n1,2\n"] {
            assert!(read_dataset_csv(text.as_bytes(), LossFamily::SquaredIdentity).is_err(), "{text}");
        }
        assert!(write_dataset_csv(Vec::new(), &matrix_fixture()).is_err());
    }

    #[test]
    fn tlmx_layout() {
        let d = matrix_fixture();
        let bytes = encode_tlmx(&d).unwrap();
        assert_eq!(&bytes[..4], b"TLMX");
        assert_eq!(bytes[4..8], 1u32.to_le_bytes());
        assert_eq!(bytes[8..10], 2u16.to_le_bytes());
        assert_eq!(bytes[10..12], 3u16.to_le_bytes());
        assert_eq!(bytes[12..16], 3u32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 8 * 3 * 7);
        // first response, then first covariate entry (0,0), then (1,0)
        assert_eq!(bytes[16..24], 1.0f64.to_le_bytes());
        assert_eq!(bytes[40..48], 0.0f64.to_le_bytes());
        assert_eq!(bytes[48..56], (3.0f64 * 0.1).to_le_bytes());
        assert_eq!(decode_tlmx(&bytes, LossFamily::LogisticLogit).unwrap(), d);
    }

    #[test]
    fn tlmx_f32_payload() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"TLMX");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        for v in [0.5f32, 1.0, -2.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let d = decode_tlmx(&bytes, LossFamily::SquaredIdentity).unwrap();
        assert_eq!(d.shape(), Shape::Matrix(1, 2));
        assert_eq!(d.responses()[0], 0.5);
        assert_eq!(d.covariate(0).as_slice(), &[1.0, -2.0]);
    }

    #[test]
    fn tlmx_rejects_corruption() {
        let good = encode_tlmx(&matrix_fixture()).unwrap();
        assert!(decode_tlmx(&good[..10], LossFamily::LogisticLogit).is_err());
        assert!(decode_tlmx(&good[..good.len() - 1], LossFamily::LogisticLogit).is_err());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode_tlmx(&bad, LossFamily::LogisticLogit).is_err());
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(decode_tlmx(&bad, LossFamily::LogisticLogit).is_err());
        let mut bad = good;
        bad[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_tlmx(&bad, LossFamily::LogisticLogit).is_err());
    }

    #[test]
    fn parameter_json_round_trip() {
        let p = Parameter::from_matrix(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.5])).unwrap();
        let back = parse_parameter_json(&parameter_json(&p).unwrap()).unwrap();
        assert_eq!(back, p);
        assert!(parse_parameter_json(r#"{"shape":{"Vector":2},"values":[1.0]}"#).is_err());
        assert!(parse_parameter_json(r#"{"shape":{"Vector":1},"values":[1.0],"extra":0}"#).is_err());
    }

    #[test]
    fn records_round_trip() {
        let r = Record {
            scenario: "homo+l0".into(),
            seed: 42,
            estimator: "truncated".into(),
            err_l1: 1.5,
            err_l2: 0.25,
            err_nuc: None,
            err_fro: None,
            tpr: Some(1.0),
            tnr: Some(0.8),
            seconds: None,
        };
        let mut buf = Vec::new();
        write_records_csv(&mut buf, std::slice::from_ref(&r)).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text,
            "scenario,seed,estimator,err_l1,err_l2,err_nuc,err_fro,tpr,tnr,seconds\nhomo+l0,42,truncated,1.5,0.25,,,1.0,0.8,\n"
        );
        assert_eq!(read_records_csv(buf.as_slice()).unwrap(), vec![r]);
        assert!(read_records_csv("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn study_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let study = GeneratedStudy {
            datasets: vec![vector_fixture(), vector_fixture()],
            true_coeffs: vec![Parameter::from_vec(vec![1.0, 0.0]).unwrap(); 2],
            true_informative: vec![true],
            covariances: None,
        };
        write_study(dir.path(), &study, None).unwrap();
        let (m, ds) = read_study(dir.path()).unwrap();
        assert_eq!(ds, study.datasets);
        assert_eq!(m.datasets, vec!["dataset_0.csv", "dataset_1.csv"]);
        assert_eq!(m.true_informative, Some(vec![true]));
    }
}
