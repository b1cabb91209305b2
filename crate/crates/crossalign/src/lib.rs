//! File formats, parallel selection, reports, the annotation service and the
//! command line built on `crossalign-core`.

pub mod bench_io;
pub mod cli;
pub mod ingest;
pub mod report;
pub mod select;
pub mod service;
