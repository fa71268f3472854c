//! Safetensors checkpoint reading.
//!
//! A checkpoint is one or more `.safetensors` files. Each file starts with an
//! 8-byte little-endian header length, followed by a JSON object mapping
//! tensor names to `{"dtype", "shape", "data_offsets"}`, followed by the
//! contiguous little-endian tensor data. Shards are merged by name; duplicate
//! names across shards are rejected.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Element types this crate reads. Everything is widened to f64 on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
    F16,
    BF16,
}

impl Dtype {
    pub fn parse(s: &str) -> Option<Dtype> {
        match s {
            "F64" => Some(Dtype::F64),
            "F32" => Some(Dtype::F32),
            "F16" => Some(Dtype::F16),
            "BF16" => Some(Dtype::BF16),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F64 => "F64",
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
        }
    }

    pub fn byte_size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
        }
    }
}

/// IEEE 754 half-precision bits to f64. All f16 values are exactly
/// representable in f64, so this decode is exact.
pub fn f16_to_f64(bits: u16) -> f64 {
    let sign = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exp = ((bits >> 10) & 0x1F) as i32;
    let mantissa = (bits & 0x3FF) as f64;
    match exp {
        0 => sign * mantissa * 2f64.powi(-24),
        0x1F => {
            if mantissa == 0.0 {
                sign * f64::INFINITY
            } else {
                f64::NAN
            }
        }
        _ => sign * (1.0 + mantissa / 1024.0) * 2f64.powi(exp - 15),
    }
}

/// bfloat16 is the top half of an f32; widening is a shift.
pub fn bf16_to_f64(bits: u16) -> f64 {
    f32::from_bits((bits as u32) << 16) as f64
}

/// Metadata for one tensor as declared in a shard header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Byte offsets relative to the start of the data section.
    pub byte_range: (usize, usize),
    /// Index into [`CheckpointIndex::files`].
    pub file: usize,
}

impl TensorMeta {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }
}

/// One dense 2-D weight matrix in row-major f64, with its source dtype kept
/// for provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub name: String,
    pub source_dtype: Dtype,
}

impl TensorMatrix {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(rows * cols, values.len());
        TensorMatrix {
            rows,
            cols,
            values,
            name: name.into(),
            source_dtype: Dtype::F64,
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }
}

#[derive(Debug)]
struct ShardFile {
    path: PathBuf,
    /// Absolute file offset where the data section begins.
    data_start: u64,
    data_len: usize,
}

/// Immutable index over all tensors of a (possibly sharded) checkpoint.
/// Safe to share across threads; every load opens its own read-only handle.
#[derive(Debug)]
pub struct CheckpointIndex {
    tensors: BTreeMap<String, TensorMeta>,
    files: Vec<ShardFile>,
}

#[derive(serde::Deserialize)]
struct RawEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// Parse the headers of all shard files and merge them into one index.
pub fn open_checkpoint<P: AsRef<Path>>(paths: &[P]) -> Result<CheckpointIndex> {
    let mut tensors: BTreeMap<String, TensorMeta> = BTreeMap::new();
    let mut files: Vec<ShardFile> = Vec::new();

    for path in paths {
        let path = path.as_ref();
        let display = path.display().to_string();
        let file_idx = files.len();

        let mut file = File::open(path).map_err(|e| Error::io(&display, e))?;
        let total_len = file
            .metadata()
            .map_err(|e| Error::io(&display, e))?
            .len();
        if total_len < 8 {
            return Err(Error::MalformedHeader {
                file: display,
                detail: format!("file is {total_len} bytes, too short for a header length"),
            });
        }
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes)
            .map_err(|e| Error::io(&display, e))?;
        let header_len = u64::from_le_bytes(len_bytes);
        if header_len > total_len - 8 {
            return Err(Error::MalformedHeader {
                file: display,
                detail: format!(
                    "declared header length {header_len} exceeds file size {total_len}"
                ),
            });
        }
        let mut header = vec![0u8; header_len as usize];
        file.read_exact(&mut header)
            .map_err(|e| Error::io(&display, e))?;
        let data_len = (total_len - 8 - header_len) as usize;

        let parsed: serde_json::Map<String, serde_json::Value> = serde_json::from_slice(&header)
            .map_err(|e| Error::HeaderJson {
                file: display.clone(),
                detail: e.to_string(),
            })?;

        let mut ranges: Vec<(usize, usize, String)> = Vec::new();
        for (name, value) in parsed {
            if name == "__metadata__" {
                continue;
            }
            let raw: RawEntry =
                serde_json::from_value(value).map_err(|e| Error::BadTensorEntry {
                    file: display.clone(),
                    name: name.clone(),
                    detail: e.to_string(),
                })?;
            let dtype = Dtype::parse(&raw.dtype).ok_or_else(|| Error::UnsupportedDtype {
                name: name.clone(),
                dtype: raw.dtype.clone(),
            })?;
            if raw.shape.is_empty() || raw.shape.contains(&0) {
                return Err(Error::BadTensorEntry {
                    file: display.clone(),
                    name: name.clone(),
                    detail: format!("shape {:?} must be non-empty with positive dims", raw.shape),
                });
            }
            let [begin, end] = raw.data_offsets;
            let expected = raw.shape.iter().product::<usize>() * dtype.byte_size();
            if end < begin || end - begin != expected {
                return Err(Error::BadTensorEntry {
                    file: display.clone(),
                    name: name.clone(),
                    detail: format!(
                        "data_offsets [{begin}, {end}] do not span {expected} bytes for shape {:?} {}",
                        raw.shape,
                        dtype.name()
                    ),
                });
            }
            if end > data_len {
                return Err(Error::BadTensorEntry {
                    file: display.clone(),
                    name: name.clone(),
                    detail: format!(
                        "data_offsets [{begin}, {end}] exceed data section length {data_len}"
                    ),
                });
            }
            ranges.push((begin, end, name.clone()));

            let meta = TensorMeta {
                name: name.clone(),
                dtype,
                shape: raw.shape,
                byte_range: (begin, end),
                file: file_idx,
            };
            if let Some(prev) = tensors.get(&name) {
                return Err(Error::DuplicateTensor {
                    name,
                    first: files[prev.file].path.display().to_string(),
                    second: display,
                });
            }
            tensors.insert(name, meta);
        }

        ranges.sort();
        for pair in ranges.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(Error::OverlappingRanges {
                    file: display,
                    a: pair[0].2.clone(),
                    b: pair[1].2.clone(),
                });
            }
        }

        files.push(ShardFile {
            path: path.to_path_buf(),
            data_start: 8 + header_len,
            data_len,
        });
    }

    Ok(CheckpointIndex { tensors, files })
}

impl CheckpointIndex {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&TensorMeta> {
        self.tensors.get(name)
    }

    /// Tensor names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn metas(&self) -> impl Iterator<Item = &TensorMeta> {
        self.tensors.values()
    }

    pub fn file_path(&self, meta: &TensorMeta) -> &Path {
        &self.files[meta.file].path
    }

    /// Load a 2-D tensor as a row-major f64 matrix, validating finiteness.
    pub fn load_matrix(&self, name: &str) -> Result<TensorMatrix> {
        let meta = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::TensorNotFound {
                name: name.to_string(),
            })?;
        if !meta.is_matrix() {
            return Err(Error::NotAMatrix {
                name: name.to_string(),
                shape: meta.shape.clone(),
            });
        }
        let bytes = self.read_bytes(meta)?;
        let values = decode_values(meta.dtype, &bytes);
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    name: name.to_string(),
                    index: i,
                });
            }
        }
        Ok(TensorMatrix {
            rows: meta.shape[0],
            cols: meta.shape[1],
            values,
            name: name.to_string(),
            source_dtype: meta.dtype,
        })
    }

    fn read_bytes(&self, meta: &TensorMeta) -> Result<Vec<u8>> {
        let shard = &self.files[meta.file];
        let display = shard.path.display().to_string();
        let mut file = File::open(&shard.path).map_err(|e| Error::io(&display, e))?;
        let (begin, end) = meta.byte_range;
        debug_assert!(end <= shard.data_len);
        file.seek(SeekFrom::Start(shard.data_start + begin as u64))
            .map_err(|e| Error::io(&display, e))?;
        let mut buf = vec![0u8; end - begin];
        file.read_exact(&mut buf)
            .map_err(|e| Error::io(&display, e))?;
        Ok(buf)
    }
}

fn decode_values(dtype: Dtype, bytes: &[u8]) -> Vec<f64> {
    match dtype {
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F16 => bytes
            .chunks_exact(2)
            .map(|c| f16_to_f64(u16::from_le_bytes([c[0], c[1]])))
            .collect(),
        Dtype::BF16 => bytes
            .chunks_exact(2)
            .map(|c| bf16_to_f64(u16::from_le_bytes([c[0], c[1]])))
            .collect(),
    }
}

/// Encode f64 values into the little-endian byte layout of `dtype`.
/// Half-precision targets round to nearest even. Used to build fixtures.
pub fn encode_values(dtype: Dtype, values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * dtype.byte_size());
    match dtype {
        Dtype::F64 => {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Dtype::F32 => {
            for v in values {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Dtype::F16 => {
            for v in values {
                out.extend_from_slice(&f32_to_f16(*v as f32).to_le_bytes());
            }
        }
        Dtype::BF16 => {
            for v in values {
                out.extend_from_slice(&f32_to_bf16(*v as f32).to_le_bytes());
            }
        }
    }
    out
}

fn f32_to_f16(value: f32) -> u16 {
    let bits = value.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp = ((bits >> 23) & 0xFF) as i32;
    let mantissa = bits & 0x7F_FFFF;
    if exp == 255 {
        return if mantissa == 0 { sign | 0x7C00 } else { sign | 0x7E00 };
    }
    let unbiased = exp - 127;
    if unbiased > 15 {
        return sign | 0x7C00;
    }
    if unbiased >= -14 {
        // normal range; round mantissa from 23 to 10 bits, ties to even
        let mut m = mantissa >> 13;
        let rem = mantissa & 0x1FFF;
        if rem > 0x1000 || (rem == 0x1000 && m & 1 == 1) {
            m += 1;
        }
        let mut e = (unbiased + 15) as u32;
        if m == 0x400 {
            m = 0;
            e += 1;
            if e >= 31 {
                return sign | 0x7C00;
            }
        }
        sign | ((e as u16) << 10) | m as u16
    } else if unbiased >= -24 {
        // subnormal
        let full = mantissa | 0x80_0000;
        let shift = (-1 - unbiased + 14) as u32; // 13..22 for exponents -15..-24
        let m = full >> (shift + 1);
        let rem = full & ((1 << (shift + 1)) - 1);
        let half = 1u32 << shift;
        let mut m = m;
        if rem > half || (rem == half && m & 1 == 1) {
            m += 1;
        }
        sign | m as u16
    } else {
        sign
    }
}

fn f32_to_bf16(value: f32) -> u16 {
    let bits = value.to_bits();
    if value.is_nan() {
        return ((bits >> 16) as u16) | 0x40;
    }
    let round = ((bits >> 16) & 1) + 0x7FFF;
    ((bits + round) >> 16) as u16
}

/// One tensor to write into a fixture file.
#[derive(Debug, Clone)]
pub struct TensorSpec {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl TensorSpec {
    pub fn from_f64(name: impl Into<String>, dtype: Dtype, shape: Vec<usize>, values: &[f64]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        TensorSpec {
            name: name.into(),
            dtype,
            shape,
            data: encode_values(dtype, values),
        }
    }

    pub fn from_raw(name: impl Into<String>, dtype: Dtype, shape: Vec<usize>, data: Vec<u8>) -> Self {
        assert_eq!(shape.iter().product::<usize>() * dtype.byte_size(), data.len());
        TensorSpec {
            name: name.into(),
            dtype,
            shape,
            data,
        }
    }
}

/// Write a safetensors file. Only used to produce test fixtures; the analysis
/// pipelines never write checkpoints.
pub fn write_safetensors(path: &Path, tensors: &[TensorSpec]) -> Result<()> {
    let display = path.display().to_string();
    let mut header = serde_json::Map::new();
    let mut offset = 0usize;
    for t in tensors {
        let end = offset + t.data.len();
        header.insert(
            t.name.clone(),
            serde_json::json!({
                "dtype": t.dtype.name(),
                "shape": t.shape,
                "data_offsets": [offset, end],
            }),
        );
        offset = end;
    }
    let header_bytes = serde_json::to_vec(&serde_json::Value::Object(header))
        .expect("header serialization cannot fail");
    let mut file = File::create(path).map_err(|e| Error::io(&display, e))?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())
        .map_err(|e| Error::io(&display, e))?;
    file.write_all(&header_bytes)
        .map_err(|e| Error::io(&display, e))?;
    for t in tensors {
        file.write_all(&t.data).map_err(|e| Error::io(&display, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn write_file(dir: &Path, name: &str, tensors: &[TensorSpec]) -> PathBuf {
        let path = dir.join(name);
        write_safetensors(&path, tensors).unwrap();
        path
    }

    #[test]
    fn single_file_indexes_all_tensors() {
        let dir = tempdir().unwrap();
        let a = TensorSpec::from_f64("a", Dtype::F32, vec![2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = TensorSpec::from_f64("b", Dtype::F32, vec![1, 3], &[5.0, 6.0, 7.0]);
        let path = write_file(dir.path(), "m.safetensors", &[a, b]);
        let index = open_checkpoint(&[path]).unwrap();
        assert_eq!(index.len(), 2);
        assert!(index.get("a").is_some());
        assert!(index.get("b").is_some());
    }

    #[test]
    fn duplicate_name_across_shards_is_an_error() {
        let dir = tempdir().unwrap();
        let t = TensorSpec::from_f64("a", Dtype::F32, vec![1, 2], &[1.0, 2.0]);
        let p1 = write_file(dir.path(), "s1.safetensors", std::slice::from_ref(&t));
        let p2 = write_file(dir.path(), "s2.safetensors", &[t]);
        let err = open_checkpoint(&[p1, p2]).unwrap_err();
        assert!(matches!(err, Error::DuplicateTensor { ref name, .. } if name == "a"));
    }

    #[test]
    fn hand_built_minimal_file_round_trips() {
        // header built by hand, byte for byte, then re-read through the parser
        let dir = tempdir().unwrap();
        let path = dir.path().join("mini.safetensors");
        let header = br#"{"t":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header);
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, &bytes).unwrap();

        let index = open_checkpoint(&[path]).unwrap();
        assert_eq!(index.len(), 1);
        let meta = index.get("t").unwrap();
        assert_eq!(meta.dtype, Dtype::F32);
        assert_eq!(meta.shape, vec![2, 2]);
        let m = index.load_matrix("t").unwrap();
        assert_eq!(m.values, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn f32_identity_decode() {
        let dir = tempdir().unwrap();
        let t = TensorSpec::from_f64("w", Dtype::F32, vec![2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let path = write_file(dir.path(), "w.safetensors", &[t]);
        let index = open_checkpoint(&[path]).unwrap();
        let m = index.load_matrix("w").unwrap();
        assert_eq!(m.rows, 2);
        assert_eq!(m.cols, 2);
        assert_eq!(m.values, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.source_dtype, Dtype::F32);
    }

    #[test]
    fn bf16_bit_pattern_decodes() {
        assert_eq!(bf16_to_f64(0x3F80), 1.0);
        assert_eq!(bf16_to_f64(0xBF80), -1.0);
        assert_eq!(bf16_to_f64(0x0000), 0.0);
        assert_eq!(bf16_to_f64(0x4000), 2.0);
    }

    /// Independent f16 oracle: assemble the equivalent f32 bit pattern
    /// directly instead of doing exponent/mantissa arithmetic.
    fn f16_oracle(bits: u16) -> f64 {
        let sign = u32::from(bits & 0x8000) << 16;
        let exp = u32::from(bits >> 10) & 0x1F;
        let mantissa = u32::from(bits & 0x3FF);
        let f32_bits = if exp == 0 {
            if mantissa == 0 {
                sign
            } else {
                // renormalize subnormal
                let mut m = mantissa;
                let mut e = 127 - 15 + 1;
                while m & 0x400 == 0 {
                    m <<= 1;
                    e -= 1;
                }
                sign | ((e as u32) << 23) | ((m & 0x3FF) << 13)
            }
        } else if exp == 0x1F {
            sign | 0x7F80_0000 | (mantissa << 13)
        } else {
            sign | ((exp + 127 - 15) << 23) | (mantissa << 13)
        };
        f32::from_bits(f32_bits) as f64
    }

    #[test]
    fn f16_decode_matches_bit_level_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut patterns: Vec<u16> = (0..2000).map(|_| rng.gen::<u16>()).collect();
        patterns.extend([0x0000, 0x8000, 0x0001, 0x03FF, 0x0400, 0x7BFF, 0x3C00, 0xBC00]);
        for bits in patterns {
            if (bits >> 10) & 0x1F == 0x1F {
                continue; // inf/nan rejected at load, not decoded
            }
            let got = f16_to_f64(bits);
            let want = f16_oracle(bits);
            assert_eq!(got, want, "bits {bits:#06x}");
        }
    }

    #[test]
    fn random_f16_tensor_loads_exactly() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let bits: Vec<u16> = (0..64)
            .map(|_| loop {
                let b = rng.gen::<u16>();
                if (b >> 10) & 0x1F != 0x1F {
                    break b;
                }
            })
            .collect();
        let mut data = Vec::new();
        for b in &bits {
            data.extend_from_slice(&b.to_le_bytes());
        }
        let dir = tempdir().unwrap();
        let t = TensorSpec::from_raw("h", Dtype::F16, vec![8, 8], data);
        let path = write_file(dir.path(), "h.safetensors", &[t]);
        let index = open_checkpoint(&[path]).unwrap();
        let m = index.load_matrix("h").unwrap();
        for (v, b) in m.values.iter().zip(&bits) {
            assert_eq!(*v, f16_oracle(*b));
        }
    }

    #[test]
    fn f64_round_trip_is_bit_exact() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let values: Vec<f64> = (0..100).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let dir = tempdir().unwrap();
        let t = TensorSpec::from_f64("d", Dtype::F64, vec![10, 10], &values);
        let path = write_file(dir.path(), "d.safetensors", &[t]);
        let index = open_checkpoint(&[path]).unwrap();
        let m = index.load_matrix("d").unwrap();
        assert_eq!(m.values, values);
    }

    #[test]
    fn load_matrix_is_pure() {
        let dir = tempdir().unwrap();
        let t = TensorSpec::from_f64("w", Dtype::F32, vec![2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let path = write_file(dir.path(), "w.safetensors", &[t]);
        let index = open_checkpoint(&[path]).unwrap();
        let a = index.load_matrix("w").unwrap();
        let b = index.load_matrix("w").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nan_is_reported_with_name_and_index() {
        let dir = tempdir().unwrap();
        let mut values = vec![1.0f64; 6];
        values[4] = f64::NAN;
        let mut data = Vec::new();
        for v in &values {
            data.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let t = TensorSpec::from_raw("w", Dtype::F32, vec![2, 3], data);
        let path = write_file(dir.path(), "w.safetensors", &[t]);
        let index = open_checkpoint(&[path]).unwrap();
        let err = index.load_matrix("w").unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref name, index: 4 } if name == "w"));
    }

    #[test]
    fn non_matrix_shapes_are_indexable_but_not_loadable() {
        let dir = tempdir().unwrap();
        let t = TensorSpec::from_f64("v", Dtype::F32, vec![4], &[1.0, 2.0, 3.0, 4.0]);
        let path = write_file(dir.path(), "v.safetensors", &[t]);
        let index = open_checkpoint(&[path]).unwrap();
        assert!(index.get("v").is_some());
        let err = index.load_matrix("v").unwrap_err();
        assert!(matches!(err, Error::NotAMatrix { .. }));
    }

    #[test]
    fn missing_tensor_is_an_error() {
        let dir = tempdir().unwrap();
        let t = TensorSpec::from_f64("a", Dtype::F32, vec![1, 1], &[1.0]);
        let path = write_file(dir.path(), "a.safetensors", &[t]);
        let index = open_checkpoint(&[path]).unwrap();
        assert!(matches!(
            index.load_matrix("zzz").unwrap_err(),
            Error::TensorNotFound { .. }
        ));
    }

    #[test]
    fn out_of_bounds_offsets_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.safetensors");
        let header = br#"{"t":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0u8; 8]); // data section only 8 bytes, offsets claim 16
        std::fs::write(&path, &bytes).unwrap();
        let err = open_checkpoint(&[path]).unwrap_err();
        assert!(matches!(err, Error::BadTensorEntry { .. }));
    }

    #[test]
    fn overlapping_ranges_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.safetensors");
        let header = br#"{"a":{"dtype":"F32","shape":[1,2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[1,2],"data_offsets":[4,12]}}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0u8; 12]);
        std::fs::write(&path, &bytes).unwrap();
        let err = open_checkpoint(&[path]).unwrap_err();
        assert!(matches!(err, Error::OverlappingRanges { .. }));
    }

    #[test]
    fn declared_header_longer_than_file_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.safetensors");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(1000u64).to_le_bytes());
        bytes.extend_from_slice(b"{}");
        std::fs::write(&path, &bytes).unwrap();
        let err = open_checkpoint(&[path]).unwrap_err();
        assert!(matches!(err, Error::MalformedHeader { .. }));
    }

    #[test]
    fn invalid_json_header_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.safetensors");
        let header = b"{not json";
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header);
        std::fs::write(&path, &bytes).unwrap();
        let err = open_checkpoint(&[path]).unwrap_err();
        assert!(matches!(err, Error::HeaderJson { .. }));
    }

    #[test]
    fn metadata_key_is_skipped() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("meta.safetensors");
        let header =
            br#"{"__metadata__":{"format":"pt"},"t":{"dtype":"F32","shape":[1,1],"data_offsets":[0,4]}}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let index = open_checkpoint(&[path]).unwrap();
        assert_eq!(index.len(), 1);
    }

    #[test]
    fn unsupported_dtype_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.safetensors");
        let header = br#"{"t":{"dtype":"I8","shape":[1,4],"data_offsets":[0,4]}}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0u8; 4]);
        std::fs::write(&path, &bytes).unwrap();
        let err = open_checkpoint(&[path]).unwrap_err();
        assert!(matches!(err, Error::UnsupportedDtype { .. }));
    }

    #[test]
    fn f16_encode_round_trips_representable_values() {
        for v in [0.0, 0.5, -0.5, 1.0, 1.5, -2.0, 0.25, 65504.0, 6.103515625e-5] {
            assert_eq!(f16_to_f64(f32_to_f16(v as f32)), v);
        }
    }
}
