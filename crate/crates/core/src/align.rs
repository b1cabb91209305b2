//! Multi-modal alignment scores for a translated caption.
//!
//! Three components are computed against the translated caption's token
//! embeddings `H_T`:
//!
//! - text-text: mean over source-caption tokens of the best cosine match in
//!   `H_T`;
//! - object-text: the same construction over detected-object label
//!   embeddings;
//! - image-text: either the best cosine between the image vector and any
//!   target token (`token-max`) or the cosine with a pooled caption vector
//!   from a joint text-image encoder (`pooled`).
//!
//! The combined score is their weighted sum. All arithmetic runs in f64 over
//! the stored f32 values and every cosine is clamped to `[-1, 1]`.

use core::fmt;
use core::str::FromStr;

use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::data::{dot, norm, DataError, DatasetRecord, ImageEmbedding, ObjectAnnotationSet, TokenEmbeddings};

/// Which embedding a failure refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Operand {
    Source,
    Target,
    Objects,
    Image,
    PooledText,
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Operand::Source => "source tokens",
            Operand::Target => "target tokens",
            Operand::Objects => "object tokens",
            Operand::Image => "image vector",
            Operand::PooledText => "pooled text vector",
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AlignError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("{operand}: row {row} has zero norm")]
    ZeroNormRow { operand: Operand, row: usize },
    #[error("{0} is empty")]
    EmptyTokenSet(Operand),
    #[error("pooled image-text mode needs a pooled text vector")]
    MissingPooledText,
    #[error("component score is not finite")]
    NonFiniteScore,
    #[error("invalid weights: every weight must be finite")]
    InvalidWeights,
}

/// Alignment failure for a specific record.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("record {id}: {source}")]
pub struct UnitError {
    pub id: String,
    pub source: AlignError,
}

fn zero_norm(operand: Operand) -> impl Fn(DataError) -> AlignError {
    move |e| match e {
        DataError::ZeroNormRow(row) => AlignError::ZeroNormRow { operand, row },
        _ => AlignError::ZeroNormRow { operand, row: 0 },
    }
}

fn clamp_unit(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// Cosine similarity of two equal-length vectors, clamped to `[-1, 1]`.
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64, AlignError> {
    if u.len() != v.len() {
        return Err(AlignError::DimMismatch { expected: u.len(), found: v.len() });
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 {
        return Err(AlignError::ZeroNormRow { operand: Operand::Source, row: 0 });
    }
    if nv == 0.0 {
        return Err(AlignError::ZeroNormRow { operand: Operand::Target, row: 0 });
    }
    Ok(clamp_unit(dot(u, v) / (nu * nv)))
}

/// Target tokens with their reciprocal norms computed once, so the three
/// components of a unit share the work.
#[derive(Debug)]
pub struct PreparedTarget<'a> {
    tokens: &'a TokenEmbeddings,
    inv_norms: alloc::vec::Vec<f64>,
}

impl<'a> PreparedTarget<'a> {
    pub fn new(tokens: &'a TokenEmbeddings) -> Result<Self, AlignError> {
        if tokens.is_empty() {
            return Err(AlignError::EmptyTokenSet(Operand::Target));
        }
        let inv_norms = tokens.inverse_norms().map_err(zero_norm(Operand::Target))?;
        Ok(Self { tokens, inv_norms })
    }

    pub fn dim(&self) -> usize {
        self.tokens.dim()
    }

    /// Best cosine between `query` (with reciprocal norm `inv_q`) and any
    /// target token.
    fn max_cosine(&self, query: &[f32], inv_q: f64) -> f64 {
        self.tokens
            .iter_rows()
            .zip(&self.inv_norms)
            .map(|(y, &inv_y)| clamp_unit(dot(query, y) * inv_q * inv_y))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn mean_max(&self, queries: &TokenEmbeddings, operand: Operand) -> Result<f64, AlignError> {
        if queries.dim() != self.dim() {
            return Err(AlignError::DimMismatch { expected: self.dim(), found: queries.dim() });
        }
        let inv = queries.inverse_norms().map_err(zero_norm(operand))?;
        let total: f64 = queries.iter_rows().zip(inv).map(|(x, inv_x)| self.max_cosine(x, inv_x)).sum();
        Ok(total / queries.rows() as f64)
    }
}

/// Text-text alignment: `(1/M) sum_{x in src} max_{y in tgt} cos(x, y)`.
pub fn text_text_align(src: &TokenEmbeddings, tgt: &TokenEmbeddings) -> Result<f64, AlignError> {
    let target = PreparedTarget::new(tgt)?;
    text_text_prepared(src, &target)
}

fn text_text_prepared(src: &TokenEmbeddings, target: &PreparedTarget<'_>) -> Result<f64, AlignError> {
    if src.is_empty() {
        return Err(AlignError::EmptyTokenSet(Operand::Source));
    }
    target.mean_max(src, Operand::Source)
}

/// Object-text alignment: `(1/K) sum_{o in obj} max_{y in tgt} cos(o, y)`.
///
/// With no objects (`K = 0`) the score is `(0.0, false)`: the value is
/// reported as zero and flagged undefined.
pub fn object_text_align(obj: &TokenEmbeddings, tgt: &TokenEmbeddings) -> Result<(f64, bool), AlignError> {
    let target = PreparedTarget::new(tgt)?;
    object_text_prepared(obj, &target)
}

fn object_text_prepared(obj: &TokenEmbeddings, target: &PreparedTarget<'_>) -> Result<(f64, bool), AlignError> {
    if obj.is_empty() {
        return Ok((0.0, false));
    }
    Ok((target.mean_max(obj, Operand::Objects)?, true))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImageTextMode {
    /// Cosine of the image vector with a pooled caption vector from a joint
    /// text-image encoder.
    #[default]
    Pooled,
    /// Best cosine of the image vector against any target token.
    TokenMax,
}

impl ImageTextMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ImageTextMode::Pooled => "pooled",
            ImageTextMode::TokenMax => "token-max",
        }
    }
}

impl fmt::Display for ImageTextMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown image-text mode {0:?} (expected pooled or token-max)")]
pub struct UnknownMode(pub String);

impl FromStr for ImageTextMode {
    type Err = UnknownMode;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pooled" => Ok(ImageTextMode::Pooled),
            "token-max" => Ok(ImageTextMode::TokenMax),
            other => Err(UnknownMode(other.into())),
        }
    }
}

pub fn image_text_align(
    img: &ImageEmbedding,
    tgt: &TokenEmbeddings,
    mode: ImageTextMode,
    pooled_text: Option<&[f32]>,
) -> Result<f64, AlignError> {
    match mode {
        ImageTextMode::Pooled => image_text_pooled(img, pooled_text),
        ImageTextMode::TokenMax => {
            let target = PreparedTarget::new(tgt)?;
            image_text_token_max(img, &target)
        }
    }
}

fn image_text_pooled(img: &ImageEmbedding, pooled_text: Option<&[f32]>) -> Result<f64, AlignError> {
    let text = pooled_text.ok_or(AlignError::MissingPooledText)?;
    if text.len() != img.dim() {
        return Err(AlignError::DimMismatch { expected: img.dim(), found: text.len() });
    }
    let (ni, nt) = (norm(img.as_slice()), norm(text));
    if ni == 0.0 {
        return Err(AlignError::ZeroNormRow { operand: Operand::Image, row: 0 });
    }
    if nt == 0.0 {
        return Err(AlignError::ZeroNormRow { operand: Operand::PooledText, row: 0 });
    }
    Ok(clamp_unit(dot(img.as_slice(), text) / (ni * nt)))
}

fn image_text_token_max(img: &ImageEmbedding, target: &PreparedTarget<'_>) -> Result<f64, AlignError> {
    if img.dim() != target.dim() {
        return Err(AlignError::DimMismatch { expected: target.dim(), found: img.dim() });
    }
    let ni = norm(img.as_slice());
    if ni == 0.0 {
        return Err(AlignError::ZeroNormRow { operand: Operand::Image, row: 0 });
    }
    Ok(target.max_cosine(img.as_slice(), 1.0 / ni))
}

/// Component weights `(text, image, object)` of the combined score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub text: f64,
    pub image: f64,
    pub object: f64,
}

impl Weights {
    pub const ALL: Weights = Weights::new(1.0, 1.0, 1.0);

    pub const fn new(text: f64, image: f64, object: f64) -> Self {
        Self { text, image, object }
    }

    pub fn is_finite(&self) -> bool {
        self.text.is_finite() && self.image.is_finite() && self.object.is_finite()
    }
}

impl Default for Weights {
    fn default() -> Self {
        Self::ALL
    }
}

/// The three component scores before weighting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Components {
    pub a_st: f64,
    pub a_it: f64,
    /// `None` when the image has no detected objects.
    pub a_ot: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentBreakdown {
    pub a_st: f64,
    pub a_it: f64,
    pub a_ot: f64,
    pub a_ot_defined: bool,
    pub combined: f64,
}

impl AlignmentBreakdown {
    pub fn components(&self) -> Components {
        Components { a_st: self.a_st, a_it: self.a_it, a_ot: self.a_ot_defined.then_some(self.a_ot) }
    }

    /// Recombines the stored components under other weights.
    pub fn reweight(&self, weights: Weights) -> Result<AlignmentBreakdown, AlignError> {
        combine(self.components(), weights)
    }
}

/// Weighted sum of the components. An undefined object score contributes
/// nothing and stays flagged.
pub fn combine(c: Components, weights: Weights) -> Result<AlignmentBreakdown, AlignError> {
    if !weights.is_finite() {
        return Err(AlignError::InvalidWeights);
    }
    let a_ot = c.a_ot.unwrap_or(0.0);
    if !(c.a_st.is_finite() && c.a_it.is_finite() && a_ot.is_finite()) {
        return Err(AlignError::NonFiniteScore);
    }
    let mut combined = weights.text * c.a_st + weights.image * c.a_it;
    if c.a_ot.is_some() {
        combined += weights.object * a_ot;
    }
    Ok(AlignmentBreakdown { a_st: c.a_st, a_it: c.a_it, a_ot, a_ot_defined: c.a_ot.is_some(), combined })
}

/// A fully joined record, ready to score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringUnit {
    pub record: DatasetRecord,
    /// Source caption tokens (`H_S`).
    pub src: TokenEmbeddings,
    /// Translated caption tokens (`H_T`).
    pub tgt: TokenEmbeddings,
    /// Detected-object label embeddings (`H_O`), possibly with zero rows.
    pub obj: TokenEmbeddings,
    pub img: ImageEmbedding,
    /// Pooled translated-caption vector from a joint text-image encoder.
    pub pooled_text: Option<alloc::vec::Vec<f32>>,
    pub objects: ObjectAnnotationSet,
}

impl ScoringUnit {
    pub fn id(&self) -> &str {
        &self.record.id
    }
}

pub fn score_components(unit: &ScoringUnit, mode: ImageTextMode) -> Result<Components, AlignError> {
    let target = PreparedTarget::new(&unit.tgt)?;
    if unit.src.dim() != target.dim() {
        return Err(AlignError::DimMismatch { expected: target.dim(), found: unit.src.dim() });
    }
    if unit.obj.dim() != target.dim() {
        return Err(AlignError::DimMismatch { expected: target.dim(), found: unit.obj.dim() });
    }
    let a_st = text_text_prepared(&unit.src, &target)?;
    let (a_ot, defined) = object_text_prepared(&unit.obj, &target)?;
    let a_it = match mode {
        ImageTextMode::Pooled => image_text_pooled(&unit.img, unit.pooled_text.as_deref())?,
        ImageTextMode::TokenMax => image_text_token_max(&unit.img, &target)?,
    };
    Ok(Components { a_st, a_it, a_ot: defined.then_some(a_ot) })
}

/// Scores every component of `unit` and combines them under `weights`.
pub fn score_unit(unit: &ScoringUnit, mode: ImageTextMode, weights: Weights) -> Result<AlignmentBreakdown, UnitError> {
    score_components(unit, mode)
        .and_then(|c| combine(c, weights))
        .map_err(|source| UnitError { id: unit.record.id.clone(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn m(rows: &[&[f32]]) -> TokenEmbeddings {
        TokenEmbeddings::from_rows(rows).unwrap()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(close(cosine(&[3.0, 4.0], &[4.0, 3.0]).unwrap(), 0.96));
        assert!(matches!(cosine(&[1.0], &[1.0, 0.0]), Err(AlignError::DimMismatch { .. })));
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(AlignError::ZeroNormRow { .. })));
    }

    #[test]
    fn text_text_examples() {
        assert!(close(text_text_align(&m(&[&[1.0, 0.0], &[0.0, 1.0]]), &m(&[&[1.0, 0.0]])).unwrap(), 0.5));
        let x = m(&[&[0.3, -2.0, 1.0], &[5.0, 0.1, 0.0]]);
        assert!(close(text_text_align(&x, &x).unwrap(), 1.0));
        assert!(close(text_text_align(&m(&[&[3.0, 4.0]]), &m(&[&[4.0, 3.0], &[0.0, 1.0]])).unwrap(), 0.96));
        let empty = TokenEmbeddings::empty(2).unwrap();
        assert_eq!(
            text_text_align(&empty, &m(&[&[1.0, 0.0]])),
            Err(AlignError::EmptyTokenSet(Operand::Source))
        );
        assert_eq!(
            text_text_align(&m(&[&[1.0, 0.0]]), &empty),
            Err(AlignError::EmptyTokenSet(Operand::Target))
        );
    }

    #[test]
    fn object_text_examples() {
        let tgt = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(object_text_align(&m(&[&[1.0, 0.0]]), &tgt).unwrap(), (1.0, true));
        let empty = TokenEmbeddings::empty(2).unwrap();
        assert_eq!(object_text_align(&empty, &tgt).unwrap(), (0.0, false));
        let (v, defined) = object_text_align(&m(&[&[0.0, 1.0], &[3.0, 4.0]]), &m(&[&[1.0, 0.0]])).unwrap();
        assert!(defined && close(v, 0.3));
        assert!(object_text_align(&empty, &empty).is_err());
    }

    #[test]
    fn image_text_examples() {
        let img = ImageEmbedding::new(vec![1.0, 0.0]).unwrap();
        let tgt = m(&[&[0.0, 1.0], &[0.6, 0.8]]);
        let v = image_text_align(&img, &tgt, ImageTextMode::TokenMax, None).unwrap();
        assert!((v - 0.6).abs() < 1e-7);
        let v = image_text_align(&img, &tgt, ImageTextMode::Pooled, Some(&[1.0, 0.0])).unwrap();
        assert_eq!(v, 1.0);
        let v = image_text_align(&img, &m(&[&[0.0, 1.0]]), ImageTextMode::TokenMax, None).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(
            image_text_align(&img, &tgt, ImageTextMode::Pooled, None),
            Err(AlignError::MissingPooledText)
        );
        assert!(matches!(
            image_text_align(&img, &m(&[&[1.0, 0.0, 0.0]]), ImageTextMode::TokenMax, None),
            Err(AlignError::DimMismatch { .. })
        ));
        assert!(matches!(
            image_text_align(&img, &tgt, ImageTextMode::Pooled, Some(&[1.0])),
            Err(AlignError::DimMismatch { .. })
        ));
    }

    #[test]
    fn combine_examples() {
        let c = Components { a_st: 0.5, a_it: 0.6, a_ot: Some(0.96) };
        assert!(close(combine(c, Weights::ALL).unwrap().combined, 2.06));
        let b = combine(Components { a_ot: None, ..c }, Weights::ALL).unwrap();
        assert!(close(b.combined, 1.1));
        assert!(!b.a_ot_defined);
        assert_eq!(combine(c, Weights::new(1.0, 0.0, 0.0)).unwrap().combined, 0.5);
        assert_eq!(
            combine(Components { a_st: f64::NAN, ..c }, Weights::ALL),
            Err(AlignError::NonFiniteScore)
        );
        assert_eq!(combine(c, Weights::new(f64::INFINITY, 1.0, 1.0)), Err(AlignError::InvalidWeights));
    }

    fn unit(src: TokenEmbeddings, tgt: TokenEmbeddings, obj: TokenEmbeddings, img: &[f32]) -> ScoringUnit {
        ScoringUnit {
            record: DatasetRecord {
                id: "u1".into(),
                image_ref: "u1.jpg".into(),
                caption_src: "s".into(),
                caption_tgt: "t".into(),
                source_tag: String::new(),
            },
            src,
            tgt,
            obj,
            img: ImageEmbedding::new(img.to_vec()).unwrap(),
            pooled_text: Some(vec![0.6, 0.8]),
            objects: ObjectAnnotationSet::default(),
        }
    }

    #[test]
    fn score_unit_composes_components() {
        // text-text 0.5, pooled image-text 0.6, object-text 1.0
        let u = unit(
            m(&[&[1.0, 0.0], &[0.0, 1.0]]),
            m(&[&[1.0, 0.0]]),
            m(&[&[1.0, 0.0]]),
            &[1.0, 0.0],
        );
        let b = score_unit(&u, ImageTextMode::Pooled, Weights::ALL).unwrap();
        assert!(close(b.a_st, 0.5));
        assert!((b.a_it - 0.6).abs() < 1e-7);
        assert!(close(b.a_ot, 1.0));
        assert!(b.a_ot_defined);
        assert!((b.combined - 2.1).abs() < 1e-7);

        let u = unit(m(&[&[1.0, 0.0]]), m(&[&[1.0, 0.0]]), TokenEmbeddings::empty(2).unwrap(), &[1.0, 0.0]);
        let b = score_unit(&u, ImageTextMode::TokenMax, Weights::ALL).unwrap();
        assert!(!b.a_ot_defined);
        assert_eq!(b.combined, 2.0);
    }

    #[test]
    fn score_unit_errors_carry_id() {
        let mut u = unit(m(&[&[1.0, 0.0]]), m(&[&[1.0, 0.0]]), m(&[&[1.0, 0.0]]), &[1.0, 0.0]);
        u.pooled_text = None;
        let err = score_unit(&u, ImageTextMode::Pooled, Weights::ALL).unwrap_err();
        assert_eq!(err.id, "u1");
        assert_eq!(err.source, AlignError::MissingPooledText);

        let u = unit(m(&[&[1.0, 0.0, 0.0]]), m(&[&[1.0, 0.0]]), m(&[&[1.0, 0.0]]), &[1.0, 0.0]);
        assert!(matches!(
            score_unit(&u, ImageTextMode::TokenMax, Weights::ALL).unwrap_err().source,
            AlignError::DimMismatch { .. }
        ));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("pooled".parse::<ImageTextMode>().unwrap(), ImageTextMode::Pooled);
        assert_eq!("token-max".parse::<ImageTextMode>().unwrap(), ImageTextMode::TokenMax);
        assert!("max".parse::<ImageTextMode>().is_err());
        assert_eq!(ImageTextMode::default(), ImageTextMode::Pooled);
    }
}
