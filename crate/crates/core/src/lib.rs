//! Scoring, ranking and meta-evaluation core for curating translated
//! image-caption corpora.
//!
//! The crate is `no_std` (it needs `alloc`) and performs no I/O. Everything
//! here is a pure function over in-memory values; file formats, the HTTP
//! annotation service and the command line live in the `crossalign` crate.
//!
//! Modules, bottom-up:
//!
//! - [`data`]: records, embedding matrices, caption normalization.
//! - [`align`]: text-text, object-text and image-text alignment and their
//!   weighted combination.
//! - [`filter`]: named filtering strategies and bounded top-K selection.
//! - [`eval`]: Pearson correlation against human judgments, per-criterion
//!   aggregation and score histograms.
//! - [`rubric`]: the two six-criterion human-evaluation rubrics.
//! - [`bench`]: challenge-prompt construction (prompt template, response
//!   parsing, the seeded generation loop, dedup, subsampling, statistics).
//! - [`annotate`]: the in-memory annotation task store behind the service.

#![no_std]
#![warn(missing_debug_implementations)]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod align;
pub mod annotate;
pub mod bench;
pub mod data;
pub mod eval;
pub mod filter;
pub mod rubric;

pub use align::{AlignmentBreakdown, ImageTextMode, ScoringUnit, Weights};
pub use data::{DatasetRecord, ImageEmbedding, ObjectAnnotationSet, TokenEmbeddings};
pub use filter::{FilterStrategy, RankedEntry, TopK};
pub use rubric::Rubric;
