//! EMB1 embedding files.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | content                                              |
//! |--------------|------------------------------------------------------|
//! | 0..4         | ASCII `EMB1`                                         |
//! | 4..8         | `u32` header length `H`                              |
//! | 8..8+H       | UTF-8 JSON `{dtype:"f32", rows, cols, layer, model_id}` |
//! | 8+H..        | `rows * cols` `f32` values, row-major                |

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Condition;

const MAGIC: &[u8; 4] = b"EMB1";

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("unsupported dtype `{0}`")]
    Dtype(String),
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("payload size mismatch: expected {expected} bytes, found {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("shape mismatch: {rows}x{cols} needs {expected} values, have {actual}")]
    Shape {
        rows: usize,
        cols: usize,
        expected: usize,
        actual: usize,
    },
    #[error("no embedding file for {condition} layer {layer} in {dir}")]
    Missing {
        dir: PathBuf,
        condition: &'static str,
        layer: u32,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EmbeddingError + '_ {
    move |source| EmbeddingError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `magic | u32 header length | header | payload`.
pub(crate) fn write_framed(
    path: &Path,
    magic: &[u8; 4],
    header: &[u8],
    payload: &[u8],
) -> Result<(), EmbeddingError> {
    let header_len = u32::try_from(header.len())
        .map_err(|_| EmbeddingError::Header("header longer than u32::MAX".into()))?;
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(magic)
        .and_then(|_| w.write_all(&header_len.to_le_bytes()))
        .and_then(|_| w.write_all(header))
        .and_then(|_| w.write_all(payload))
        .and_then(|_| w.flush())
        .map_err(io_err(path))
}

/// Reads a framed file; returns `(header bytes, payload bytes)`.
///
/// With `header_only` the payload is not read and comes back empty.
pub(crate) fn read_framed(
    path: &Path,
    magic: &[u8; 4],
    header_only: bool,
) -> Result<(Vec<u8>, Vec<u8>), EmbeddingError> {
    let mut f = File::open(path).map_err(io_err(path))?;
    let mut prefix = [0u8; 8];
    let mut got = 0;
    while got < 8 {
        let n = f.read(&mut prefix[got..]).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        got += n;
    }
    if got < 4 || &prefix[..4] != magic {
        return Err(EmbeddingError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&prefix[..got.min(4)]).into_owned(),
        });
    }
    if got < 8 {
        return Err(EmbeddingError::Header("missing header length".into()));
    }
    let header_len = u32::from_le_bytes(prefix[4..8].try_into().unwrap()) as usize;
    let mut header = vec![0u8; header_len];
    f.read_exact(&mut header)
        .map_err(|_| EmbeddingError::Header("header shorter than declared length".into()))?;
    let mut payload = Vec::new();
    if !header_only {
        f.read_to_end(&mut payload).map_err(io_err(path))?;
    }
    Ok((header, payload))
}

/// JSON header of an EMB1 file. Field order is part of the format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingHeader {
    pub dtype: String,
    pub rows: usize,
    pub cols: usize,
    pub layer: u32,
    pub model_id: String,
}

/// Row-major matrix of last-token hidden states for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub rows: usize,
    pub cols: usize,
    pub layer: u32,
    pub model_id: String,
    pub values: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        layer: u32,
        model_id: impl Into<String>,
        values: Vec<f32>,
    ) -> Result<Self, EmbeddingError> {
        let expected = rows * cols;
        if values.len() != expected {
            return Err(EmbeddingError::Shape {
                rows,
                cols,
                expected,
                actual: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite(i));
        }
        Ok(EmbeddingMatrix {
            rows,
            cols,
            layer,
            model_id: model_id.into(),
            values,
        })
    }

    pub fn zeros(rows: usize, cols: usize, layer: u32, model_id: impl Into<String>) -> Self {
        EmbeddingMatrix {
            rows,
            cols,
            layer,
            model_id: model_id.into(),
            values: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn header(&self) -> EmbeddingHeader {
        EmbeddingHeader {
            dtype: "f32".to_string(),
            rows: self.rows,
            cols: self.cols,
            layer: self.layer,
            model_id: self.model_id.clone(),
        }
    }
}

pub fn write_embeddings(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<(), EmbeddingError> {
    let path = path.as_ref();
    if m.values.len() != m.rows * m.cols {
        return Err(EmbeddingError::Shape {
            rows: m.rows,
            cols: m.cols,
            expected: m.rows * m.cols,
            actual: m.values.len(),
        });
    }
    if let Some(i) = m.values.iter().position(|v| !v.is_finite()) {
        return Err(EmbeddingError::NonFinite(i));
    }
    let header = serde_json::to_vec(&m.header()).expect("header serializes");
    let mut payload = Vec::with_capacity(m.values.len() * 4);
    for v in &m.values {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write_framed(path, MAGIC, &header, &payload)
}

fn parse_header(bytes: &[u8]) -> Result<EmbeddingHeader, EmbeddingError> {
    let h: EmbeddingHeader =
        serde_json::from_slice(bytes).map_err(|e| EmbeddingError::Header(e.to_string()))?;
    if h.dtype != "f32" {
        return Err(EmbeddingError::Dtype(h.dtype));
    }
    Ok(h)
}

/// Reads only the header of an EMB1 file.
pub fn read_embedding_header(path: impl AsRef<Path>) -> Result<EmbeddingHeader, EmbeddingError> {
    let (header, _) = read_framed(path.as_ref(), MAGIC, true)?;
    parse_header(&header)
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix, EmbeddingError> {
    let (header, payload) = read_framed(path.as_ref(), MAGIC, false)?;
    let h = parse_header(&header)?;
    let expected = h
        .rows
        .checked_mul(h.cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| EmbeddingError::Header("rows * cols overflows".into()))?;
    if payload.len() < expected {
        return Err(EmbeddingError::Truncated {
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(EmbeddingError::SizeMismatch {
            expected,
            actual: payload.len(),
        });
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    EmbeddingMatrix::new(h.rows, h.cols, h.layer, h.model_id, values)
}

/// A directory of EMB1 files named `{condition}_layer{NN}.emb1`.
#[derive(Debug, Clone)]
pub struct EmbeddingDir {
    dir: PathBuf,
    layers: BTreeMap<Condition, Vec<u32>>,
}

impl EmbeddingDir {
    pub fn file_name(condition: Condition, layer: u32) -> String {
        format!("{}_layer{:02}.emb1", condition.as_str(), layer)
    }

    pub fn open(dir: impl AsRef<Path>) -> Result<Self, EmbeddingError> {
        let dir = dir.as_ref().to_path_buf();
        let mut layers: BTreeMap<Condition, Vec<u32>> = BTreeMap::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let entry = entry.map_err(io_err(&dir))?;
            let name = entry.file_name();
            let Some(name) = name.to_str() else { continue };
            for cond in [Condition::NoToolInput, Condition::WithToolDesc] {
                let prefix = format!("{}_layer", cond.as_str());
                let layer = name
                    .strip_prefix(&prefix)
                    .and_then(|rest| rest.strip_suffix(".emb1"))
                    .and_then(|n| n.parse::<u32>().ok());
                if let Some(layer) = layer {
                    layers.entry(cond).or_default().push(layer);
                }
            }
        }
        for v in layers.values_mut() {
            v.sort_unstable();
        }
        Ok(EmbeddingDir { dir, layers })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    /// Layers available for `condition`, ascending.
    pub fn layers(&self, condition: Condition) -> &[u32] {
        self.layers
            .get(&condition)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn load(
        &self,
        condition: Condition,
        layer: u32,
    ) -> Result<EmbeddingMatrix, EmbeddingError> {
        if !self.layers(condition).contains(&layer) {
            return Err(EmbeddingError::Missing {
                dir: self.dir.clone(),
                condition: condition.as_str(),
                layer,
            });
        }
        read_embeddings(self.dir.join(Self::file_name(condition, layer)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_matrix_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.emb1");
        let m = EmbeddingMatrix::new(2, 3, 4, "toy", vec![1., 2., 3., 4., 5., 6.]).unwrap();
        write_embeddings(&m, &path).unwrap();
        assert_eq!(read_embeddings(&path).unwrap(), m);
    }

    #[test]
    fn byte_layout_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.emb1");
        let m = EmbeddingMatrix::new(1, 1, 0, "x", vec![1.0]).unwrap();
        write_embeddings(&m, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header = br#"{"dtype":"f32","rows":1,"cols":1,"layer":0,"model_id":"x"}"#;
        let mut expected = b"EMB1".to_vec();
        expected.extend_from_slice(&(header.len() as u32).to_le_bytes());
        expected.extend_from_slice(header);
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn payload_one_value_short_is_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.emb1");
        let m = EmbeddingMatrix::new(2, 3, 0, "toy", vec![0.5; 6]).unwrap();
        write_embeddings(&m, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_embeddings(&path),
            Err(EmbeddingError::Truncated {
                expected: 24,
                actual: 20
            })
        ));
    }

    #[test]
    fn trailing_bytes_are_a_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.emb1");
        write_embeddings(&EmbeddingMatrix::zeros(1, 2, 0, "toy"), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_embeddings(&path),
            Err(EmbeddingError::SizeMismatch { .. })
        ));
    }

    #[test]
    fn zero_rows_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.emb1");
        let m = EmbeddingMatrix::zeros(0, 16, 2, "toy");
        write_embeddings(&m, &path).unwrap();
        let back = read_embeddings(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.rows, 0);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.emb1");
        fs::write(&path, b"EMB2\0\0\0\0").unwrap();
        assert!(matches!(
            read_embeddings(&path),
            Err(EmbeddingError::BadMagic { .. })
        ));
    }

    #[test]
    fn non_finite_values_are_refused_on_write() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = EmbeddingMatrix::zeros(1, 2, 0, "toy");
        m.values[1] = f32::NAN;
        assert!(matches!(
            write_embeddings(&m, dir.path().join("m.emb1")),
            Err(EmbeddingError::NonFinite(1))
        ));
    }

    #[test]
    fn directory_lists_layers_per_condition() {
        let dir = tempfile::tempdir().unwrap();
        for layer in [3, 0, 1] {
            let m = EmbeddingMatrix::zeros(2, 2, layer, "toy");
            let name = EmbeddingDir::file_name(Condition::NoToolInput, layer);
            write_embeddings(&m, dir.path().join(name)).unwrap();
        }
        let d = EmbeddingDir::open(dir.path()).unwrap();
        assert_eq!(d.layers(Condition::NoToolInput), &[0, 1, 3]);
        assert!(d.layers(Condition::WithToolDesc).is_empty());
        assert_eq!(d.load(Condition::NoToolInput, 3).unwrap().layer, 3);
        assert!(d.load(Condition::NoToolInput, 2).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn any_finite_matrix_round_trips(
            rows in 0usize..6,
            cols in 1usize..6,
            layer in 0u32..40,
            seed in proptest::collection::vec(-1e30f32..1e30f32, 36),
        ) {
            let values = seed[..rows * cols].to_vec();
            let m = EmbeddingMatrix::new(rows, cols, layer, "p", values).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.emb1");
            write_embeddings(&m, &path).unwrap();
            let back = read_embeddings(&path).unwrap();
            prop_assert_eq!(back.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            m.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(back, m);
        }
    }
}
