//! Checkpoint container files.
//!
//! ```text
//! FILE   := HEADER_LEN HEADER DATA
//! HEADER_LEN := u64, little-endian, byte length of HEADER
//! HEADER := compact UTF-8 JSON object, keys in lexicographic order:
//!   "__metadata__": { "step": "<int>", "tokens": "<int>", ... },
//!   "<tensor>":     { "dtype": "f32" | "f64", "offsets": [begin, end], "shape": [..] }
//! DATA   := little-endian tensor payloads; offsets are relative to the
//!           start of DATA and tile it exactly (no gaps, no overlap)
//! ```
//!
//! The header encoding is canonical: a container is only accepted if
//! re-encoding its parsed header reproduces the stored bytes, so
//! `serialize(parse(bytes)) == bytes` holds for every file that opens.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde_json::Value;

use super::StoreError;

pub const METADATA_KEY: &str = "__metadata__";

/// Upper bound on the JSON header, to refuse garbage length prefixes early.
const MAX_HEADER_LEN: u64 = 256 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Self, StoreError> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(StoreError::UnknownDtype(other.to_string())),
        }
    }
}

/// Location and layout of one tensor inside a container.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Half-open byte range relative to the start of the data section.
    pub byte_range: (u64, u64),
}

impl TensorRecord {
    pub fn elements(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> u64 {
        self.byte_range.1 - self.byte_range.0
    }
}

/// Owned tensor payload, in its storage precision.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorValues {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorValues {
    pub fn dtype(&self) -> DType {
        match self {
            TensorValues::F32(_) => DType::F32,
            TensorValues::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorValues::F32(v) => v.len(),
            TensorValues::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Widens to f64. Exact for both dtypes.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorValues::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorValues::F64(v) => v.clone(),
        }
    }

    /// Rounds f64 values once to `dtype` (round-to-nearest-even for f32).
    pub fn from_f64(dtype: DType, values: &[f64]) -> Self {
        match dtype {
            DType::F32 => TensorValues::F32(values.iter().map(|&x| x as f32).collect()),
            DType::F64 => TensorValues::F64(values.to_vec()),
        }
    }

    fn write_le<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        match self {
            TensorValues::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            TensorValues::F64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: TensorValues,
}

impl Tensor {
    pub fn f32(shape: Vec<usize>, values: Vec<f32>) -> Self {
        Self { shape, values: TensorValues::F32(values) }
    }

    pub fn f64(shape: Vec<usize>, values: Vec<f64>) -> Self {
        Self { shape, values: TensorValues::F64(values) }
    }
}

/// Parsed container header. Payloads stay on disk until requested.
#[derive(Debug, Clone, PartialEq)]
pub struct ContainerHeader {
    pub tensors: BTreeMap<String, TensorRecord>,
    pub metadata: BTreeMap<String, String>,
    /// Byte length of the JSON header (excluding the 8-byte prefix).
    pub header_len: u64,
    pub data_len: u64,
}

impl ContainerHeader {
    /// Absolute file offset where the data section begins.
    pub fn data_offset(&self) -> u64 {
        8 + self.header_len
    }

    pub fn step(&self) -> u64 {
        // validated at parse time
        self.metadata["step"].parse().unwrap_or_default()
    }

    pub fn tokens(&self) -> u64 {
        self.metadata["tokens"].parse().unwrap_or_default()
    }
}

/// An opened checkpoint container. Immutable after open.
#[derive(Debug, Clone)]
pub struct Container {
    path: PathBuf,
    header: ContainerHeader,
}

impl std::ops::Deref for Container {
    type Target = ContainerHeader;
    fn deref(&self) -> &ContainerHeader {
        &self.header
    }
}

fn validate_metadata(metadata: &BTreeMap<String, String>) -> Result<(), StoreError> {
    for key in ["step", "tokens"] {
        let raw = metadata
            .get(key)
            .ok_or_else(|| StoreError::Metadata(format!("missing required key \"{key}\"")))?;
        raw.parse::<u64>().map_err(|_| {
            StoreError::Metadata(format!("\"{key}\" must be a non-negative integer, got {raw:?}"))
        })?;
    }
    Ok(())
}

/// Canonical header encoding shared by the writer and the parser's
/// canonicality check.
fn encode_header(
    tensors: &BTreeMap<String, TensorRecord>,
    metadata: &BTreeMap<String, String>,
) -> Vec<u8> {
    let mut entries: BTreeMap<&str, String> = BTreeMap::new();
    let meta = serde_json::to_string(metadata).expect("string map serializes");
    entries.insert(METADATA_KEY, meta);
    for (name, rec) in tensors {
        let shape = serde_json::to_string(&rec.shape).expect("shape serializes");
        entries.insert(
            name.as_str(),
            format!(
                "{{\"dtype\":\"{}\",\"offsets\":[{},{}],\"shape\":{}}}",
                rec.dtype.as_str(),
                rec.byte_range.0,
                rec.byte_range.1,
                shape
            ),
        );
    }
    let mut out = String::from("{");
    for (i, (key, value)) in entries.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&serde_json::to_string(key).expect("key serializes"));
        out.push(':');
        out.push_str(value);
    }
    out.push('}');
    out.into_bytes()
}

/// Assigns contiguous byte ranges in name order.
pub fn layout_records<'a, I>(specs: I) -> Result<BTreeMap<String, TensorRecord>, StoreError>
where
    I: IntoIterator<Item = (&'a str, DType, &'a [usize])>,
{
    let mut sorted: BTreeMap<String, (DType, Vec<usize>)> = BTreeMap::new();
    for (name, dtype, shape) in specs {
        if name.is_empty() {
            return Err(StoreError::EmptyName);
        }
        if name == METADATA_KEY {
            return Err(StoreError::ReservedName(name.to_string()));
        }
        if sorted.insert(name.to_string(), (dtype, shape.to_vec())).is_some() {
            return Err(StoreError::DuplicateName(name.to_string()));
        }
    }
    if sorted.is_empty() {
        return Err(StoreError::NoTensors);
    }
    let mut offset = 0u64;
    let mut records = BTreeMap::new();
    for (name, (dtype, shape)) in sorted {
        let elements = checked_elements(&name, &shape)?;
        let len = elements
            .checked_mul(dtype.size() as u64)
            .ok_or_else(|| StoreError::ShapeOverflow(name.clone()))?;
        let end = offset + len;
        records.insert(
            name.clone(),
            TensorRecord { name, dtype, shape, byte_range: (offset, end) },
        );
        offset = end;
    }
    Ok(records)
}

fn checked_elements(name: &str, shape: &[usize]) -> Result<u64, StoreError> {
    shape.iter().try_fold(1u64, |acc, &d| {
        acc.checked_mul(d as u64)
            .ok_or_else(|| StoreError::ShapeOverflow(name.to_string()))
    })
}

/// Writes a complete container in one call.
pub fn write_container(
    tensors: &BTreeMap<String, Tensor>,
    metadata: &BTreeMap<String, String>,
    path: &Path,
) -> Result<(), StoreError> {
    for (name, t) in tensors {
        let expected: usize = t.shape.iter().product();
        if expected != t.values.len() {
            return Err(StoreError::ShapeMismatch {
                name: name.clone(),
                expected,
                actual: t.values.len(),
            });
        }
    }
    let records = layout_records(
        tensors
            .iter()
            .map(|(n, t)| (n.as_str(), t.values.dtype(), t.shape.as_slice())),
    )?;
    let mut writer = ContainerWriter::create(path, records, metadata)?;
    for (name, t) in tensors {
        writer.write_tensor(name, &t.values)?;
    }
    writer.finish()
}

/// Writes a container whose layout is fixed up front; payloads are appended
/// one tensor at a time in name order.
pub struct ContainerWriter {
    out: BufWriter<File>,
    records: Vec<TensorRecord>,
    next: usize,
    written_in_current: u64,
}

impl ContainerWriter {
    pub fn create(
        path: &Path,
        records: BTreeMap<String, TensorRecord>,
        metadata: &BTreeMap<String, String>,
    ) -> Result<Self, StoreError> {
        validate_metadata(metadata)?;
        if records.is_empty() {
            return Err(StoreError::NoTensors);
        }
        let header = encode_header(&records, metadata);
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        let mut records: Vec<TensorRecord> = records.into_values().collect();
        records.sort_by_key(|r| r.byte_range);
        Ok(Self { out, records, next: 0, written_in_current: 0 })
    }

    /// Name of the tensor whose payload is expected next, if any.
    pub fn expected(&self) -> Option<&TensorRecord> {
        self.records.get(self.next)
    }

    pub fn write_tensor(&mut self, name: &str, values: &TensorValues) -> Result<(), StoreError> {
        self.write_chunk(name, values)?;
        self.end_tensor(name)
    }

    /// Appends part of the current tensor's payload.
    pub fn write_chunk(&mut self, name: &str, values: &TensorValues) -> Result<(), StoreError> {
        let rec = self
            .records
            .get(self.next)
            .ok_or_else(|| StoreError::WriteOrder(format!("unexpected tensor \"{name}\"")))?;
        if rec.name != name {
            return Err(StoreError::WriteOrder(format!(
                "expected tensor \"{}\", got \"{name}\"",
                rec.name
            )));
        }
        if values.dtype() != rec.dtype {
            return Err(StoreError::DtypeMismatch(name.to_string()));
        }
        let bytes = (values.len() * rec.dtype.size()) as u64;
        if self.written_in_current + bytes > rec.byte_len() {
            return Err(StoreError::ShapeMismatch {
                name: name.to_string(),
                expected: rec.elements(),
                actual: ((self.written_in_current + bytes) / rec.dtype.size() as u64) as usize,
            });
        }
        values.write_le(&mut self.out)?;
        self.written_in_current += bytes;
        Ok(())
    }

    pub fn end_tensor(&mut self, name: &str) -> Result<(), StoreError> {
        let rec = &self.records[self.next];
        if self.written_in_current != rec.byte_len() {
            return Err(StoreError::ShapeMismatch {
                name: name.to_string(),
                expected: rec.elements(),
                actual: (self.written_in_current / rec.dtype.size() as u64) as usize,
            });
        }
        self.next += 1;
        self.written_in_current = 0;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), StoreError> {
        if let Some(rec) = self.records.get(self.next) {
            return Err(StoreError::WriteOrder(format!("tensor \"{}\" was never written", rec.name)));
        }
        self.out.flush()?;
        Ok(())
    }
}

/// Parses and validates a container header from any seekable source.
///
/// Reads exactly `8 + header_len` bytes; the data section is only measured
/// (by seeking to the end), never read.
pub fn read_header<R: Read + Seek>(reader: &mut R) -> Result<ContainerHeader, StoreError> {
    let total = reader.seek(SeekFrom::End(0))?;
    reader.seek(SeekFrom::Start(0))?;
    if total < 8 {
        return Err(StoreError::Truncated("file shorter than header length prefix".into()));
    }
    let mut len_buf = [0u8; 8];
    reader.read_exact(&mut len_buf)?;
    let header_len = u64::from_le_bytes(len_buf);
    if header_len > MAX_HEADER_LEN || 8 + header_len > total {
        return Err(StoreError::Truncated(format!(
            "header declares {header_len} bytes but file has {}",
            total - 8
        )));
    }
    let mut raw = vec![0u8; header_len as usize];
    reader.read_exact(&mut raw)?;
    let data_len = total - 8 - header_len;

    let text = std::str::from_utf8(&raw).map_err(|e| StoreError::Header(e.to_string()))?;
    let value: Value = serde_json::from_str(text).map_err(|e| StoreError::Header(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| StoreError::Header("header is not a JSON object".into()))?;

    let mut metadata = BTreeMap::new();
    let mut tensors = BTreeMap::new();
    for (key, entry) in obj {
        if key == METADATA_KEY {
            let m = entry
                .as_object()
                .ok_or_else(|| StoreError::Header("__metadata__ must be an object".into()))?;
            for (k, v) in m {
                let s = v
                    .as_str()
                    .ok_or_else(|| StoreError::Header(format!("metadata value for {k:?} is not a string")))?;
                metadata.insert(k.clone(), s.to_string());
            }
            continue;
        }
        tensors.insert(key.clone(), parse_record(key, entry)?);
    }
    if !obj.contains_key(METADATA_KEY) {
        return Err(StoreError::Metadata("missing __metadata__ entry".into()));
    }
    validate_metadata(&metadata)?;
    if tensors.is_empty() {
        return Err(StoreError::NoTensors);
    }
    validate_layout(&tensors, data_len)?;
    if encode_header(&tensors, &metadata) != raw {
        return Err(StoreError::NonCanonical);
    }
    Ok(ContainerHeader { tensors, metadata, header_len, data_len })
}

fn parse_record(name: &str, entry: &Value) -> Result<TensorRecord, StoreError> {
    let bad = |what: &str| StoreError::Header(format!("tensor {name:?}: {what}"));
    if name.is_empty() {
        return Err(StoreError::EmptyName);
    }
    let obj = entry.as_object().ok_or_else(|| bad("entry is not an object"))?;
    let dtype = DType::parse(obj.get("dtype").and_then(Value::as_str).ok_or_else(|| bad("missing dtype"))?)?;
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing shape"))?
        .iter()
        .map(|d| d.as_u64().map(|d| d as usize).ok_or_else(|| bad("shape entries must be non-negative integers")))
        .collect::<Result<Vec<_>, _>>()?;
    let offsets = obj
        .get("offsets")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing offsets"))?;
    if offsets.len() != 2 {
        return Err(bad("offsets must be [begin, end]"));
    }
    let begin = offsets[0].as_u64().ok_or_else(|| bad("offsets must be integers"))?;
    let end = offsets[1].as_u64().ok_or_else(|| bad("offsets must be integers"))?;
    if end < begin {
        return Err(bad("offset end precedes begin"));
    }
    let rec = TensorRecord { name: name.to_string(), dtype, shape, byte_range: (begin, end) };
    let expected = checked_elements(name, &rec.shape)?
        .checked_mul(dtype.size() as u64)
        .ok_or_else(|| StoreError::ShapeOverflow(name.to_string()))?;
    if rec.byte_len() != expected {
        return Err(bad(&format!(
            "byte range holds {} bytes but shape {:?} needs {expected}",
            rec.byte_len(),
            rec.shape
        )));
    }
    Ok(rec)
}

fn validate_layout(tensors: &BTreeMap<String, TensorRecord>, data_len: u64) -> Result<(), StoreError> {
    let mut ranges: Vec<(u64, u64, &str)> = tensors
        .values()
        .map(|r| (r.byte_range.0, r.byte_range.1, r.name.as_str()))
        .collect();
    ranges.sort();
    let mut cursor = 0u64;
    let mut prev_name = "";
    for (begin, end, name) in ranges {
        if begin < cursor {
            return Err(StoreError::Overlap(prev_name.to_string(), name.to_string()));
        }
        if begin > cursor {
            return Err(StoreError::Gap { before: name.to_string(), at: cursor });
        }
        cursor = end;
        prev_name = name;
    }
    if cursor > data_len {
        return Err(StoreError::Truncated(format!(
            "truncated data section: tensors need {cursor} bytes, file holds {data_len}"
        )));
    }
    if cursor < data_len {
        return Err(StoreError::TrailingData(data_len - cursor));
    }
    Ok(())
}

impl Container {
    /// Opens a container and validates its header. Payloads are not loaded.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref();
        let mut file = File::open(path).map_err(|e| StoreError::Open(path.display().to_string(), e))?;
        let header = read_header(&mut file)?;
        Ok(Self { path: path.to_path_buf(), header })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn header(&self) -> &ContainerHeader {
        &self.header
    }

    pub fn record(&self, name: &str) -> Result<&TensorRecord, StoreError> {
        self.header
            .tensors
            .get(name)
            .ok_or_else(|| StoreError::UnknownTensor(name.to_string()))
    }

    /// Loads one tensor, widened to f64 (exact for f32).
    pub fn load_tensor(&self, name: &str) -> Result<Vec<f64>, StoreError> {
        let mut reader = self.reader()?;
        let rec = self.record(name)?.clone();
        let mut out = Vec::with_capacity(rec.elements());
        reader.read_elements(&rec, 0, rec.elements(), &mut out)?;
        Ok(out)
    }

    /// Loads one tensor in its storage precision.
    pub fn load_values(&self, name: &str) -> Result<TensorValues, StoreError> {
        let rec = self.record(name)?;
        let bytes = self.reader()?.read_bytes(rec)?;
        Ok(match rec.dtype {
            DType::F32 => TensorValues::F32(
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            DType::F64 => TensorValues::F64(
                bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
        })
    }

    /// Loads every tensor, in name order.
    pub fn load_all(&self) -> Result<BTreeMap<String, Tensor>, StoreError> {
        self.header
            .tensors
            .values()
            .map(|r| {
                Ok((r.name.clone(), Tensor { shape: r.shape.clone(), values: self.load_values(&r.name)? }))
            })
            .collect()
    }

    /// Opens an independent read handle for chunked access.
    pub fn reader(&self) -> Result<TensorReader, StoreError> {
        let file = File::open(&self.path).map_err(|e| StoreError::Open(self.path.display().to_string(), e))?;
        Ok(TensorReader { file, data_offset: self.header.data_offset(), buf: Vec::new() })
    }

    /// Re-emits the container byte-for-byte: canonical header followed by
    /// the data section in its stored layout.
    pub fn serialize_to<W: Write>(&self, out: &mut W) -> Result<(), StoreError> {
        let header = encode_header(&self.header.tensors, &self.header.metadata);
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        let mut file = File::open(&self.path)?;
        file.seek(SeekFrom::Start(self.header.data_offset()))?;
        let copied = std::io::copy(&mut file.take(self.header.data_len), out)?;
        if copied != self.header.data_len {
            return Err(StoreError::Truncated("data section shrank while copying".into()));
        }
        Ok(())
    }
}

/// A read handle for pulling element ranges out of tensors.
pub struct TensorReader {
    file: File,
    data_offset: u64,
    buf: Vec<u8>,
}

impl TensorReader {
    fn read_bytes(&mut self, rec: &TensorRecord) -> Result<Vec<u8>, StoreError> {
        self.file.seek(SeekFrom::Start(self.data_offset + rec.byte_range.0))?;
        let mut bytes = vec![0u8; rec.byte_len() as usize];
        self.file.read_exact(&mut bytes).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => StoreError::PayloadLength(rec.name.clone()),
            _ => StoreError::Io(e),
        })?;
        Ok(bytes)
    }

    /// Appends elements `[start, start + count)` of `rec`, widened to f64.
    pub fn read_elements(
        &mut self,
        rec: &TensorRecord,
        start: usize,
        count: usize,
        out: &mut Vec<f64>,
    ) -> Result<(), StoreError> {
        if start + count > rec.elements() {
            return Err(StoreError::PayloadLength(rec.name.clone()));
        }
        let size = rec.dtype.size();
        self.file
            .seek(SeekFrom::Start(self.data_offset + rec.byte_range.0 + (start * size) as u64))?;
        self.buf.resize(count * size, 0);
        self.file.read_exact(&mut self.buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => StoreError::PayloadLength(rec.name.clone()),
            _ => StoreError::Io(e),
        })?;
        match rec.dtype {
            DType::F32 => out.extend(
                self.buf
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64),
            ),
            DType::F64 => out.extend(self.buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()))),
        }
        Ok(())
    }
}
