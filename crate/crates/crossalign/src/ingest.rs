//! Corpus inputs: the line-delimited manifest, `EMB1` embedding files and
//! detection files, and the join that turns them into scoring units.
//!
//! Embedding file layout (little-endian):
//!
//! ```text
//! header:  b"EMB1" | u32 version (=1) | u32 dim | u64 entry count
//! entry:   u32 id byte length | id bytes (UTF-8) | u32 rows | rows*dim f32
//! ```

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crossalign_core::data::{validate_record, DatasetRecord, DetectedObject, ObjectAnnotationSet, RecordIssue};
use crossalign_core::{ImageEmbedding, ScoringUnit, TokenEmbeddings};
use serde::{Deserialize, Serialize};

pub const MAGIC: [u8; 4] = *b"EMB1";
pub const VERSION: u32 = 1;
const HEADER_LEN: u64 = 20;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    RecordParse { line: usize, message: String },
    #[error("not an EMB1 file (magic {0:?})")]
    FormatMismatch([u8; 4]),
    #[error("unsupported EMB1 version {0}")]
    UnsupportedVersion(u32),
    #[error("embedding file truncated at byte offset {0}")]
    Truncated(u64),
    #[error("invalid embedding entry {id:?}: {message}")]
    BadEntry { id: String, message: String },
    #[error("duplicate embedding id {0:?}")]
    DuplicateId(String),
}

impl IngestError {
    pub fn is_io(&self) -> bool {
        matches!(self, IngestError::Io(_))
    }
}

/// Streams manifest records with their 1-based line numbers and raw text.
/// Blank lines are skipped.
pub struct ManifestReader<R> {
    lines: io::Lines<R>,
    line_no: usize,
}

impl<R: BufRead> ManifestReader<R> {
    pub fn new(reader: R) -> Self {
        Self { lines: reader.lines(), line_no: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestLine {
    pub line: usize,
    pub record: DatasetRecord,
    pub raw: String,
}

impl<R: BufRead> Iterator for ManifestReader<R> {
    type Item = Result<ManifestLine, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let raw = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            self.line_no += 1;
            if raw.trim().is_empty() {
                continue;
            }
            let line = self.line_no;
            return Some(
                serde_json::from_str::<DatasetRecord>(&raw)
                    .map(|record| ManifestLine { line, record, raw })
                    .map_err(|e| IngestError::RecordParse { line, message: e.to_string() }),
            );
        }
    }
}

/// Parses a whole manifest. Malformed lines are collected, not fatal; only
/// read failures abort.
pub fn parse_manifest<R: BufRead>(reader: R) -> Result<(Vec<ManifestLine>, Vec<IngestError>), IngestError> {
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for item in ManifestReader::new(reader) {
        match item {
            Ok(r) => records.push(r),
            Err(e) if e.is_io() => return Err(e),
            Err(e) => errors.push(e),
        }
    }
    Ok((records, errors))
}

fn read_array<const N: usize, R: Read>(r: &mut R, offset: u64) -> Result<[u8; N], IngestError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => IngestError::Truncated(offset),
        _ => e.into(),
    })?;
    Ok(buf)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingFileHeader {
    pub version: u32,
    pub dim: u32,
    pub entry_count: u64,
}

fn read_header<R: Read>(r: &mut R) -> Result<EmbeddingFileHeader, IngestError> {
    let magic: [u8; 4] = read_array(r, 0)?;
    if magic != MAGIC {
        return Err(IngestError::FormatMismatch(magic));
    }
    let version = u32::from_le_bytes(read_array(r, 4)?);
    if version != VERSION {
        return Err(IngestError::UnsupportedVersion(version));
    }
    let dim = u32::from_le_bytes(read_array(r, 8)?);
    if dim == 0 {
        return Err(IngestError::BadEntry { id: String::new(), message: "header dim is 0".into() });
    }
    let entry_count = u64::from_le_bytes(read_array(r, 12)?);
    Ok(EmbeddingFileHeader { version, dim, entry_count })
}

#[derive(Debug, Clone, Copy)]
struct EntryLocation {
    payload_offset: u64,
    rows: u32,
}

/// Random-access reader over an embedding file. The id index is built once,
/// on open, without loading payloads.
pub struct EmbeddingReader<R> {
    inner: R,
    header: EmbeddingFileHeader,
    index: HashMap<String, EntryLocation>,
    order: Vec<String>,
}

impl EmbeddingReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, IngestError> {
        Self::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read + Seek> EmbeddingReader<R> {
    pub fn new(mut inner: R) -> Result<Self, IngestError> {
        let len = inner.seek(SeekFrom::End(0))?;
        inner.seek(SeekFrom::Start(0))?;
        let header = read_header(&mut inner)?;
        let row_bytes = u64::from(header.dim) * 4;
        let mut offset = HEADER_LEN;
        let mut index = HashMap::new();
        let mut order = Vec::new();
        for _ in 0..header.entry_count {
            let entry_start = offset;
            let id_len = u32::from_le_bytes(read_array(&mut inner, entry_start)?);
            offset += 4;
            if offset + u64::from(id_len) > len {
                return Err(IngestError::Truncated(entry_start));
            }
            let mut id = vec![0u8; id_len as usize];
            inner.read_exact(&mut id)?;
            offset += u64::from(id_len);
            let id = String::from_utf8(id).map_err(|_| IngestError::BadEntry {
                id: String::new(),
                message: format!("id at offset {entry_start} is not UTF-8"),
            })?;
            let rows = u32::from_le_bytes(read_array(&mut inner, offset)?);
            offset += 4;
            let payload = u64::from(rows) * row_bytes;
            if offset + payload > len {
                return Err(IngestError::Truncated(entry_start));
            }
            if index.insert(id.clone(), EntryLocation { payload_offset: offset, rows }).is_some() {
                return Err(IngestError::DuplicateId(id));
            }
            order.push(id);
            offset += payload;
            inner.seek(SeekFrom::Start(offset))?;
        }
        Ok(Self { inner, header, index, order })
    }

    pub fn header(&self) -> EmbeddingFileHeader {
        self.header
    }

    pub fn dim(&self) -> usize {
        self.header.dim as usize
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Ids in file order.
    pub fn ids(&self) -> &[String] {
        &self.order
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn get(&mut self, id: &str) -> Result<Option<TokenEmbeddings>, IngestError> {
        let Some(loc) = self.index.get(id).copied() else { return Ok(None) };
        self.inner.seek(SeekFrom::Start(loc.payload_offset))?;
        let n = loc.rows as usize * self.dim();
        let mut bytes = vec![0u8; n * 4];
        self.inner.read_exact(&mut bytes)?;
        let data: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        TokenEmbeddings::new(loc.rows as usize, self.dim(), data)
            .map(Some)
            .map_err(|e| IngestError::BadEntry { id: id.into(), message: e.to_string() })
    }
}

/// Loads a whole embedding file into memory.
pub fn read_embeddings(path: impl AsRef<Path>) -> Result<HashMap<String, TokenEmbeddings>, IngestError> {
    let mut reader = EmbeddingReader::open(path)?;
    let ids = reader.ids().to_vec();
    let mut out = HashMap::with_capacity(ids.len());
    for id in ids {
        let m = reader.get(&id)?.expect("indexed id");
        out.insert(id, m);
    }
    Ok(out)
}

/// Writes `entries` as an embedding file. Every matrix must have width `dim`.
pub fn write_embeddings<'a, W, I>(mut w: W, dim: usize, entries: I) -> Result<(), IngestError>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a TokenEmbeddings)>,
    I::IntoIter: ExactSizeIterator,
{
    let entries = entries.into_iter();
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&u32::try_from(dim).expect("dim fits u32").to_le_bytes())?;
    w.write_all(&(entries.len() as u64).to_le_bytes())?;
    for (id, m) in entries {
        if m.dim() != dim {
            return Err(IngestError::BadEntry { id: id.into(), message: format!("dim {} != file dim {dim}", m.dim()) });
        }
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id.as_bytes())?;
        w.write_all(&(m.rows() as u32).to_le_bytes())?;
        for v in m.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One line of a detection file: every object the detector reported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub id: String,
    #[serde(default)]
    pub objects: Vec<DetectedObject>,
}

impl DetectionRecord {
    /// Indices of objects scoring strictly above `threshold`.
    pub fn kept_indices(&self, threshold: f64) -> Vec<usize> {
        self.objects.iter().enumerate().filter(|(_, o)| o.score > threshold).map(|(i, _)| i).collect()
    }

    pub fn thresholded(&self, threshold: f64) -> ObjectAnnotationSet {
        ObjectAnnotationSet {
            id: self.id.clone(),
            objects: self.kept_indices(threshold).into_iter().map(|i| self.objects[i].clone()).collect(),
        }
    }
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Parses a detection file, checking labels and score ranges.
pub fn load_detections<R: BufRead>(reader: R) -> Result<HashMap<String, DetectionRecord>, IngestError> {
    let mut out = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| IngestError::RecordParse { line: i + 1, message };
        let rec: DetectionRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if let Some(o) = rec.objects.iter().find(|o| !(0.0..=1.0).contains(&o.score) || o.label.trim().is_empty()) {
            return Err(parse_err(format!("object {:?} has score {} or an empty label", o.label, o.score)));
        }
        out.insert(rec.id.clone(), rec);
    }
    Ok(out)
}

/// Detected objects per id, keeping only scores strictly above `threshold`.
pub fn load_objects<R: BufRead>(reader: R, threshold: f64) -> Result<HashMap<String, ObjectAnnotationSet>, IngestError> {
    Ok(load_detections(reader)?.into_iter().map(|(id, d)| (id, d.thresholded(threshold))).collect())
}

/// Lookup of embeddings by record id.
pub trait EmbeddingLookup {
    fn lookup(&mut self, id: &str) -> Result<Option<TokenEmbeddings>, IngestError>;
}

impl EmbeddingLookup for HashMap<String, TokenEmbeddings> {
    fn lookup(&mut self, id: &str) -> Result<Option<TokenEmbeddings>, IngestError> {
        Ok(self.get(id).cloned())
    }
}

impl<R: Read + Seek> EmbeddingLookup for EmbeddingReader<R> {
    fn lookup(&mut self, id: &str) -> Result<Option<TokenEmbeddings>, IngestError> {
        self.get(id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Missing {
    Source,
    Target,
    Objects,
    Image,
    PooledText,
    /// Object embedding rows match neither the raw nor the thresholded
    /// detection count.
    ObjectRows { rows: usize, detected: usize, kept: usize },
    /// The image entry is not a single finite row.
    BadImage,
    Invalid(Vec<RecordIssue>),
    DuplicateId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Orphan {
    pub id: String,
    pub missing: Vec<Missing>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JoinPolicy {
    /// Build units with zero object rows when object embeddings are absent.
    pub allow_missing_objects: bool,
    /// Require a pooled text vector (pooled image-text mode).
    pub require_pooled_text: bool,
    pub threshold: f64,
}

impl Default for JoinPolicy {
    fn default() -> Self {
        Self { allow_missing_objects: false, require_pooled_text: true, threshold: DEFAULT_THRESHOLD }
    }
}

/// Every embedding source a join draws on. `detections` is `None` when no
/// detection file was supplied; object rows are then used unfiltered.
pub struct Sources<'a> {
    pub src: &'a mut dyn EmbeddingLookup,
    pub tgt: &'a mut dyn EmbeddingLookup,
    pub obj: Option<&'a mut dyn EmbeddingLookup>,
    pub img: &'a mut dyn EmbeddingLookup,
    pub pooled: Option<&'a mut dyn EmbeddingLookup>,
    pub detections: Option<&'a HashMap<String, DetectionRecord>>,
}

impl std::fmt::Debug for Sources<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Sources").finish_non_exhaustive()
    }
}

/// Builds scoring units for `records`. Every manifest id ends up either in a
/// unit or in the orphan report, never both.
pub fn join_units(
    records: impl IntoIterator<Item = DatasetRecord>,
    sources: &mut Sources<'_>,
    policy: JoinPolicy,
) -> Result<(Vec<ScoringUnit>, Vec<Orphan>), IngestError> {
    let mut units = Vec::new();
    let mut orphans = Vec::new();
    let mut seen = HashSet::new();
    for record in records {
        if !seen.insert(record.id.clone()) {
            orphans.push(Orphan { id: record.id, missing: vec![Missing::DuplicateId] });
            continue;
        }
        match join_one(record, sources, policy)? {
            Ok(u) => units.push(u),
            Err(o) => orphans.push(o),
        }
    }
    Ok((units, orphans))
}

fn join_one(record: DatasetRecord, s: &mut Sources<'_>, policy: JoinPolicy) -> Result<Result<ScoringUnit, Orphan>, IngestError> {
    let id = record.id.clone();
    let mut missing = Vec::new();
    let issues = validate_record(&record);
    if !issues.is_empty() {
        missing.push(Missing::Invalid(issues));
    }
    let src = s.src.lookup(&id)?;
    let tgt = s.tgt.lookup(&id)?;
    let img = s.img.lookup(&id)?;
    let pooled = match s.pooled.as_mut() {
        Some(p) => p.lookup(&id)?,
        None => None,
    };
    let obj = match s.obj.as_mut() {
        Some(o) => o.lookup(&id)?,
        None => None,
    };
    if src.is_none() {
        missing.push(Missing::Source);
    }
    if tgt.is_none() {
        missing.push(Missing::Target);
    }
    let img = match img.map(ImageEmbedding::try_from) {
        None => {
            missing.push(Missing::Image);
            None
        }
        Some(Err(_)) => {
            missing.push(Missing::BadImage);
            None
        }
        Some(Ok(v)) => Some(v),
    };
    let pooled_text = match pooled {
        Some(p) if p.rows() == 1 => Some(p.into_vec()),
        _ if policy.require_pooled_text => {
            missing.push(Missing::PooledText);
            None
        }
        _ => None,
    };

    let dim = tgt.as_ref().or(src.as_ref()).map(TokenEmbeddings::dim).unwrap_or(1);
    let detection = s.detections.and_then(|d| d.get(&id));
    let (obj, objects) = match (obj, detection) {
        (Some(m), Some(det)) => {
            let kept = det.kept_indices(policy.threshold);
            let objects = det.thresholded(policy.threshold);
            if m.rows() == det.objects.len() {
                (Some(m.select_rows(&kept)), objects)
            } else if m.rows() == kept.len() {
                (Some(m), objects)
            } else {
                missing.push(Missing::ObjectRows { rows: m.rows(), detected: det.objects.len(), kept: kept.len() });
                (None, objects)
            }
        }
        (Some(m), None) if s.detections.is_none() => {
            (Some(m), ObjectAnnotationSet { id: id.clone(), objects: Vec::new() })
        }
        (_, Some(det)) if det.kept_indices(policy.threshold).is_empty() => {
            (TokenEmbeddings::empty(dim).ok(), det.thresholded(policy.threshold))
        }
        _ if policy.allow_missing_objects => {
            (TokenEmbeddings::empty(dim).ok(), ObjectAnnotationSet { id: id.clone(), objects: Vec::new() })
        }
        _ => {
            missing.push(Missing::Objects);
            (None, ObjectAnnotationSet::default())
        }
    };

    if !missing.is_empty() {
        return Ok(Err(Orphan { id, missing }));
    }
    let (Some(src), Some(tgt), Some(obj), Some(img)) = (src, tgt, obj, img) else {
        unreachable!("missing pieces are reported above")
    };
    Ok(Ok(ScoringUnit { record, src, tgt, obj, img, pooled_text, objects }))
}
