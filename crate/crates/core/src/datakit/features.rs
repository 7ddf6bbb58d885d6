//! Feature files and annotation records.
//!
//! Feature file layout (little endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "MATRFEAT"
//! 8       4     u32 format version (1)
//! 12      4     u32 reserved (0)
//! 16      4     u32 L (frames)
//! 20      4     u32 input_dim
//! 24      4*L*input_dim  f32 row-major features
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{MatrError, Result};

pub const FEATURE_MAGIC: &[u8; 8] = b"MATRFEAT";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

/// Default spacing between sampled frames.
pub const DEFAULT_FRAME_PERIOD_SEC: f64 = 2.0;

/// Per-frame features of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    /// `[L, input_dim]`
    pub features: Array,
    pub frame_period_sec: f64,
}

impl FeatureSequence {
    pub fn new(video_id: impl Into<String>, features: Array, frame_period_sec: f64) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(MatrError::shape(
                "FeatureSequence",
                format!("features must be [L, dim], got {:?}", features.shape()),
            ));
        }
        if !features.is_finite() {
            return Err(MatrError::InvalidArgument("features contain non-finite values".into()));
        }
        if !(frame_period_sec > 0.0) {
            return Err(MatrError::InvalidArgument(format!(
                "frame period must be positive, got {frame_period_sec}"
            )));
        }
        Ok(FeatureSequence {
            video_id: video_id.into(),
            features,
            frame_period_sec,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// `L * frame_period_sec`
    pub fn duration_sec(&self) -> f64 {
        self.len() as f64 * self.frame_period_sec
    }

    /// Rows `s..=e` as a new array.
    pub fn rows(&self, s: usize, e: usize) -> Array {
        let d = self.dim();
        Array::from_parts(vec![e + 1 - s, d], self.features.data()[s * d..(e + 1) * d].to_vec())
    }
}

/// Rounds every value to the nearest `f32`, matching what a feature file stores.
pub fn round_to_f32(a: &mut Array) {
    for v in a.data_mut() {
        *v = *v as f32 as f64;
    }
}

pub fn save_features(path: &Path, seq: &FeatureSequence) -> Result<()> {
    let (l, d) = (seq.len(), seq.dim());
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * l * d);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    buf.extend_from_slice(&(l as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for v in seq.features.data() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| MatrError::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| MatrError::io(path, e))
}

/// Reads a feature file; the video id defaults to the file stem.
pub fn load_features(path: &Path, frame_period_sec: f64) -> Result<FeatureSequence> {
    let bytes = fs::read(path).map_err(|e| MatrError::io(path, e))?;
    if bytes.len() < HEADER_LEN {
        return Err(MatrError::format(path, format!("file has {} bytes, header needs {HEADER_LEN}", bytes.len())));
    }
    if &bytes[0..8] != FEATURE_MAGIC {
        return Err(MatrError::format(path, "bad magic (offset 0)"));
    }
    let word = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = word(8);
    if version != FEATURE_VERSION {
        return Err(MatrError::format(path, format!("unsupported version {version} (offset 8)")));
    }
    let (l, d) = (word(16) as usize, word(20) as usize);
    if l == 0 || d == 0 {
        return Err(MatrError::format(path, format!("declared shape ({l}, {d}) is empty (offset 16)")));
    }
    let expected = HEADER_LEN + 4 * l * d;
    if bytes.len() != expected {
        return Err(MatrError::format(
            path,
            format!("declared shape ({l}, {d}) needs {expected} bytes, file has {}", bytes.len()),
        ));
    }
    let mut data = Vec::with_capacity(l * d);
    for (k, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(MatrError::format(
                path,
                format!("non-finite value at frame {}, dim {}", k / d, k % d),
            ));
        }
        data.push(v as f64);
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    FeatureSequence::new(id, Array::from_parts(vec![l, d], data), frame_period_sec)
        .map_err(|e| MatrError::format(path, e.to_string()))
}

/// One annotated (target, query) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub target_id: String,
    pub query_id: String,
    pub start_sec: f64,
    pub end_sec: f64,
}

impl AnnotationRecord {
    pub fn validate(&self, target_duration_sec: Option<f64>) -> Result<()> {
        let ok = self.start_sec.is_finite()
            && self.end_sec.is_finite()
            && self.start_sec >= 0.0
            && self.start_sec < self.end_sec
            && target_duration_sec.is_none_or(|d| self.end_sec <= d);
        if ok {
            Ok(())
        } else {
            Err(MatrError::InvalidArgument(format!(
                "moment ({}, {}) of {}/{} out of range (duration {:?})",
                self.start_sec, self.end_sec, self.target_id, self.query_id, target_duration_sec
            )))
        }
    }
}

/// Reads a JSON-lines file of `T`, reporting the failing line.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| MatrError::io(path, e))?;
    let mut out = Vec::new();
    for (no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| MatrError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| MatrError::format(path, format!("line {}: {e}", no + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| MatrError::io(dir, e))?;
    }
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| MatrError::io(path, e))
}

/// Loads and validates annotations.
pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let recs: Vec<AnnotationRecord> = read_jsonl(path)?;
    for (i, r) in recs.iter().enumerate() {
        r.validate(None)
            .map_err(|e| MatrError::format(path, format!("record {}: {e}", i + 1)))?;
    }
    Ok(recs)
}
