//! Shared domain types and normalization helpers.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum DataError {
    #[error("row {0} has zero norm")]
    ZeroNormRow(usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("row {row} contains a non-finite value")]
    NonFinite { row: usize },
    #[error("embedding dimension must be at least 1")]
    ZeroDim,
    #[error("payload of {len} values does not fill {rows} rows of dim {dim}")]
    Shape { rows: usize, dim: usize, len: usize },
}

/// One image-caption pair of a manifest.
///
/// `caption_src` is the original caption, `caption_tgt` its English
/// translation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub image_ref: String,
    pub caption_src: String,
    pub caption_tgt: String,
    #[serde(default)]
    pub source_tag: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecordIssue {
    MissingId,
    MissingImageRef,
    MissingSource,
    MissingTranslation,
}

/// Lists every invariant `record` violates. An empty list means the record is
/// scorable.
pub fn validate_record(record: &DatasetRecord) -> Vec<RecordIssue> {
    let mut issues = Vec::new();
    if record.id.trim().is_empty() {
        issues.push(RecordIssue::MissingId);
    }
    if record.image_ref.trim().is_empty() {
        issues.push(RecordIssue::MissingImageRef);
    }
    if record.caption_src.trim().is_empty() {
        issues.push(RecordIssue::MissingSource);
    }
    if record.caption_tgt.trim().is_empty() {
        issues.push(RecordIssue::MissingTranslation);
    }
    issues
}

/// Row-major `rows x dim` matrix of per-token embeddings.
///
/// Zero rows are allowed (an image with no detected objects). Entries are
/// always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddings {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl TokenEmbeddings {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self, DataError> {
        if dim == 0 {
            return Err(DataError::ZeroDim);
        }
        if rows.checked_mul(dim) != Some(data.len()) {
            return Err(DataError::Shape { rows, dim, len: data.len() });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite { row: pos / dim });
        }
        Ok(Self { rows, dim, data })
    }

    /// An empty matrix of the given width.
    pub fn empty(dim: usize) -> Result<Self, DataError> {
        Self::new(0, dim, Vec::new())
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self, DataError> {
        let dim = rows.first().map(|r| r.as_ref().len()).ok_or(DataError::ZeroDim)?;
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(DataError::DimMismatch { expected: dim, found: row.len() });
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), dim, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        // chunks_exact on an empty slice with dim >= 1 yields nothing
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Returns a copy with `other`'s rows appended.
    pub fn concat(&self, other: &TokenEmbeddings) -> Result<Self, DataError> {
        if other.dim != self.dim {
            return Err(DataError::DimMismatch { expected: self.dim, found: other.dim });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self { rows: self.rows + other.rows, dim: self.dim, data })
    }

    /// Copy holding only the listed rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: indices.len(), dim: self.dim, data }
    }

    /// Reciprocal L2 norm of every row, accumulated in f64.
    pub fn inverse_norms(&self) -> Result<Vec<f64>, DataError> {
        self.iter_rows()
            .enumerate()
            .map(|(i, row)| {
                let norm = norm(row);
                if norm > 0.0 {
                    Ok(1.0 / norm)
                } else {
                    Err(DataError::ZeroNormRow(i))
                }
            })
            .collect()
    }
}

/// Pooled embedding of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedding {
    data: Vec<f32>,
}

impl ImageEmbedding {
    pub fn new(data: Vec<f32>) -> Result<Self, DataError> {
        if data.is_empty() {
            return Err(DataError::ZeroDim);
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DataError::NonFinite { row: 0 });
        }
        Ok(Self { data })
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

impl TryFrom<TokenEmbeddings> for ImageEmbedding {
    type Error = DataError;

    /// Image vectors travel through embedding files as one-row matrices.
    fn try_from(m: TokenEmbeddings) -> Result<Self, DataError> {
        if m.rows != 1 {
            return Err(DataError::Shape { rows: m.rows, dim: m.dim, len: m.data.len() });
        }
        Self::new(m.data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedObject {
    pub label: String,
    pub score: f64,
}

/// Objects detected in one record's image, after thresholding.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectAnnotationSet {
    pub id: String,
    pub objects: Vec<DetectedObject>,
}

impl ObjectAnnotationSet {
    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }
}

pub(crate) fn dot(u: &[f32], v: &[f32]) -> f64 {
    u.iter().zip(v).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum()
}

pub(crate) fn norm(u: &[f32]) -> f64 {
    libm::sqrt(dot(u, u))
}

/// Scales every row to unit L2 norm.
pub fn unit_normalize(m: &TokenEmbeddings) -> Result<TokenEmbeddings, DataError> {
    let inv = m.inverse_norms()?;
    let mut data = Vec::with_capacity(m.data.len());
    for (row, s) in m.iter_rows().zip(inv) {
        data.extend(row.iter().map(|&v| (f64::from(v) * s) as f32));
    }
    Ok(TokenEmbeddings { rows: m.rows, dim: m.dim, data })
}

const TERMINAL_PUNCT: &[char] = &[
    '.', '!', '?', ',', ';', ':', '\u{2026}', '\u{3002}', '\u{ff01}', '\u{ff1f}', '\u{ff0c}',
    '\u{ff1b}', '\u{ff1a}',
];

/// Lexical normalization used for duplicate detection: trim, collapse runs of
/// whitespace to one space, lowercase, and drop trailing punctuation.
pub fn normalize_caption(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for word in text.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        for c in word.chars() {
            out.extend(c.to_lowercase());
        }
    }
    while let Some(last) = out.chars().last() {
        if TERMINAL_PUNCT.contains(&last) || last == ' ' {
            out.pop();
        } else {
            break;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn record() -> DatasetRecord {
        DatasetRecord {
            id: "r1".into(),
            image_ref: "img/r1.jpg".into(),
            caption_src: "茶道".into(),
            caption_tgt: "a tea ceremony".into(),
            source_tag: "laion".into(),
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_caption("  A Tea  Ceremony. "), "a tea ceremony");
        assert_eq!(normalize_caption("abc"), "abc");
        assert_eq!(normalize_caption("Example  1:\tX"), "example 1: x");
        assert_eq!(normalize_caption(""), "");
        assert_eq!(normalize_caption("a . ."), "a");
        assert_eq!(normalize_caption("茶道。"), "茶道");
    }

    #[test]
    fn unit_normalize_examples() {
        let m = TokenEmbeddings::from_rows(&[[3.0f32, 4.0]]).unwrap();
        let n = unit_normalize(&m).unwrap();
        assert!((n.row(0)[0] - 0.6).abs() < 1e-6);
        assert!((n.row(0)[1] - 0.8).abs() < 1e-6);

        let m = TokenEmbeddings::from_rows(&[[1.0f32, 0.0]]).unwrap();
        assert_eq!(unit_normalize(&m).unwrap().row(0), &[1.0, 0.0]);

        let m = TokenEmbeddings::from_rows(&[[0.0f32, 0.0]]).unwrap();
        assert_eq!(unit_normalize(&m), Err(DataError::ZeroNormRow(0)));

        let m = TokenEmbeddings::from_rows(&[[1.0f32, 1.0], [0.0, 0.0]]).unwrap();
        assert_eq!(unit_normalize(&m), Err(DataError::ZeroNormRow(1)));
    }

    #[test]
    fn validate_examples() {
        let mut r = record();
        assert!(validate_record(&r).is_empty());
        r.id.clear();
        assert_eq!(validate_record(&r), vec![RecordIssue::MissingId]);
        let mut r = record();
        r.caption_tgt = "  ".into();
        assert_eq!(validate_record(&r), vec![RecordIssue::MissingTranslation]);
    }

    #[test]
    fn matrix_shape_checks() {
        assert_eq!(TokenEmbeddings::new(1, 0, vec![]), Err(DataError::ZeroDim));
        assert_eq!(
            TokenEmbeddings::new(2, 2, vec![1.0; 3]),
            Err(DataError::Shape { rows: 2, dim: 2, len: 3 })
        );
        assert_eq!(
            TokenEmbeddings::new(2, 2, vec![1.0, 1.0, f32::NAN, 0.0]),
            Err(DataError::NonFinite { row: 1 })
        );
        let e = TokenEmbeddings::empty(4).unwrap();
        assert_eq!(e.iter_rows().count(), 0);
        assert!(e.inverse_norms().unwrap().is_empty());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalize_is_idempotent(s in "\\PC{0,40}") {
                let once = normalize_caption(&s);
                prop_assert_eq!(normalize_caption(&once), once);
            }

            #[test]
            fn unit_rows_and_scale_invariant_cosine(
                a in proptest::collection::vec(-10.0f32..10.0, 4),
                b in proptest::collection::vec(-10.0f32..10.0, 4),
                s in 0.01f32..100.0,
            ) {
                prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
                let m = TokenEmbeddings::from_rows(&[a.clone(), b.clone()]).unwrap();
                let n = unit_normalize(&m).unwrap();
                for row in n.iter_rows() {
                    prop_assert!((norm(row) - 1.0).abs() <= 1e-6);
                }
                let scaled: Vec<f32> = a.iter().map(|v| v * s).collect();
                let m2 = TokenEmbeddings::from_rows(&[scaled, b]).unwrap();
                let n2 = unit_normalize(&m2).unwrap();
                let c1 = dot(n.row(0), n.row(1));
                let c2 = dot(n2.row(0), n2.row(1));
                prop_assert!((c1 - c2).abs() <= 1e-6);
            }
        }
    }
}
