//! Desk-scale laboratory for video-level multi-label classification.
//!
//! The crate covers the full experimental pipeline: dataset ingestion
//! (TFRecord, a native binary format, seeded synthetic generation), a zoo
//! of dense-network architectures with exact backpropagation, the GAP@k
//! competition metric, submission-file I/O, and three ensembling
//! strategies. Everything is seeded and deterministic: the same inputs and
//! seeds reproduce results bit for bit.

pub mod bench;
pub mod datamodel;
pub mod ensemble;
pub mod ingest;
pub mod metrics;
pub mod modelzoo;
pub mod nncore;
pub mod rng;
pub mod submission;
pub mod training;
