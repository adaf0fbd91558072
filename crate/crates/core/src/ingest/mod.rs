//! Dataset ingestion: TFRecord containers holding `tf.Example` payloads,
//! a fixed-layout native binary format, and seeded synthetic generation.
//!
//! Every reader validates each decoded example against the dataset schema
//! before yielding it, so downstream code only ever sees well-formed
//! examples.

mod crc32c;
mod native;
mod synthetic;
mod tfexample;
mod tfrecord;

pub use crc32c::{crc32c, masked_crc32c};
pub use native::{write_native, NativeReader, NativeWriter};
pub use synthetic::{LinearTeacher, SyntheticConfig, SyntheticIter};
pub use tfexample::{decode_video_example, encode_video_example};
pub use tfrecord::{read_tfrecord_stream, TfRecordReader, TfRecordWriter};

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::datamodel::{DatasetSchema, Example, ValidationError};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("crc mismatch in record starting at byte {offset}")]
    CrcMismatch { offset: u64 },
    #[error("truncated record starting at byte {offset}")]
    TruncatedRecord { offset: u64 },
    #[error("not a recognized dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    BadVersion(u8),
    #[error("missing feature {0:?}")]
    MissingFeature(String),
    #[error("wrong type for feature {0:?}")]
    WrongType(String),
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Validation(#[from] ValidationError),
}

/// A source of validated examples: a file in either on-disk format, or a
/// synthetic generator config. Opening an iterator is cheap; multiple
/// independent iterations over the same handle are allowed.
#[derive(Clone, Debug)]
pub enum DatasetHandle {
    Native {
        path: PathBuf,
        schema: DatasetSchema,
    },
    TfRecord {
        path: PathBuf,
        schema: DatasetSchema,
    },
    Synthetic(SyntheticConfig),
}

impl DatasetHandle {
    /// Open a native-format file; the schema comes from its header.
    pub fn open_native(path: impl AsRef<Path>) -> Result<Self, IngestError> {
        let path = path.as_ref().to_path_buf();
        let schema = NativeReader::open(&path)?.schema();
        Ok(DatasetHandle::Native { path, schema })
    }

    /// Open a TFRecord file. The container does not carry a schema, so the
    /// caller supplies one.
    pub fn open_tfrecord(path: impl AsRef<Path>, schema: DatasetSchema) -> Self {
        DatasetHandle::TfRecord {
            path: path.as_ref().to_path_buf(),
            schema,
        }
    }

    /// Wrap a synthetic generator config as a dataset.
    pub fn synthetic(cfg: SyntheticConfig) -> Result<Self, IngestError> {
        cfg.validate()?;
        Ok(DatasetHandle::Synthetic(cfg))
    }

    /// Sniff a file's magic to pick the reader: native files start with
    /// "YT8V", anything else is treated as a TFRecord container.
    pub fn open_auto(
        path: impl AsRef<Path>,
        tfrecord_schema: DatasetSchema,
    ) -> Result<Self, IngestError> {
        let path = path.as_ref();
        let mut head = [0u8; 4];
        let n = File::open(path)?.read(&mut head)?;
        if n == 4 && &head == b"YT8V" {
            Self::open_native(path)
        } else {
            Ok(Self::open_tfrecord(path, tfrecord_schema))
        }
    }

    pub fn schema(&self) -> DatasetSchema {
        match self {
            DatasetHandle::Native { schema, .. } | DatasetHandle::TfRecord { schema, .. } => {
                *schema
            }
            DatasetHandle::Synthetic(cfg) => cfg.schema(),
        }
    }

    /// Number of examples, when known up front.
    pub fn count(&self) -> Option<u64> {
        match self {
            DatasetHandle::Synthetic(cfg) => Some(cfg.num_videos),
            _ => None,
        }
    }

    pub fn iter(&self) -> Result<ExampleIter, IngestError> {
        match self {
            DatasetHandle::Native { path, .. } => {
                Ok(ExampleIter::Native(NativeReader::open(path)?))
            }
            DatasetHandle::TfRecord { path, schema } => Ok(ExampleIter::TfRecord {
                records: read_tfrecord_stream(path)?,
                schema: *schema,
            }),
            DatasetHandle::Synthetic(cfg) => Ok(ExampleIter::Synthetic(cfg.iter())),
        }
    }

    /// Materialize the whole dataset in memory.
    pub fn load(&self) -> Result<Vec<Example>, IngestError> {
        self.iter()?.collect()
    }
}

pub enum ExampleIter {
    Native(NativeReader),
    TfRecord {
        records: TfRecordReader<std::io::BufReader<File>>,
        schema: DatasetSchema,
    },
    Synthetic(SyntheticIter),
}

impl Iterator for ExampleIter {
    type Item = Result<Example, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        match self {
            ExampleIter::Native(r) => r.next(),
            ExampleIter::TfRecord { records, schema } => {
                let payload = match records.next()? {
                    Ok(p) => p,
                    Err(e) => return Some(Err(e)),
                };
                Some(decode_video_example(&payload, schema))
            }
            ExampleIter::Synthetic(it) => it.next().map(Ok),
        }
    }
}
