//! Fixed-layout native dataset format.
//!
//! ```text
//! magic "YT8V", version 0x01
//! u32 LE num_classes, u32 LE rgb_dim, u32 LE audio_dim
//! per record:
//!   u16 LE id length, id bytes (UTF-8)
//!   u16 LE label count, labels as u32 LE (ascending)
//!   rgb   as f32 LE × rgb_dim
//!   audio as f32 LE × audio_dim
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::IngestError;
use crate::datamodel::{validate_example, DatasetSchema, Example, FeatureVector};

const MAGIC: &[u8; 4] = b"YT8V";
const VERSION: u8 = 0x01;

pub struct NativeWriter {
    inner: BufWriter<File>,
    schema: DatasetSchema,
}

impl NativeWriter {
    pub fn create(path: impl AsRef<Path>, schema: DatasetSchema) -> Result<Self, IngestError> {
        let mut inner = BufWriter::new(File::create(path)?);
        inner.write_all(MAGIC)?;
        inner.write_all(&[VERSION])?;
        inner.write_all(&schema.vocab.num_classes.to_le_bytes())?;
        inner.write_all(&(schema.rgb_dim as u32).to_le_bytes())?;
        inner.write_all(&(schema.audio_dim as u32).to_le_bytes())?;
        Ok(NativeWriter { inner, schema })
    }

    pub fn write_example(&mut self, ex: &Example) -> Result<(), IngestError> {
        validate_example(ex, &self.schema)?;
        let id = ex.video_id.as_bytes();
        assert!(
            id.len() <= u16::MAX as usize,
            "video id longer than 65535 bytes"
        );
        assert!(
            ex.labels.len() <= u16::MAX as usize,
            "more than 65535 labels"
        );
        self.inner.write_all(&(id.len() as u16).to_le_bytes())?;
        self.inner.write_all(id)?;
        self.inner
            .write_all(&(ex.labels.len() as u16).to_le_bytes())?;
        for &label in &ex.labels {
            self.inner.write_all(&label.to_le_bytes())?;
        }
        for v in ex.features.concat() {
            self.inner.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), IngestError> {
        self.inner.flush()?;
        Ok(())
    }
}

#[derive(Debug)]
pub struct NativeReader {
    inner: BufReader<File>,
    schema: DatasetSchema,
    offset: u64,
    failed: bool,
}

impl NativeReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, IngestError> {
        let mut inner = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        inner
            .read_exact(&mut magic)
            .map_err(|_| IngestError::BadMagic)?;
        if &magic != MAGIC {
            return Err(IngestError::BadMagic);
        }
        let mut version = [0u8; 1];
        inner
            .read_exact(&mut version)
            .map_err(|_| IngestError::BadVersion(0))?;
        if version[0] != VERSION {
            return Err(IngestError::BadVersion(version[0]));
        }
        let mut word = [0u8; 4];
        let mut next_u32 = |inner: &mut BufReader<File>| -> Result<u32, IngestError> {
            inner
                .read_exact(&mut word)
                .map_err(|_| IngestError::TruncatedRecord { offset: 0 })?;
            Ok(u32::from_le_bytes(word))
        };
        let num_classes = next_u32(&mut inner)?;
        let rgb_dim = next_u32(&mut inner)? as usize;
        let audio_dim = next_u32(&mut inner)? as usize;
        if num_classes == 0 {
            return Err(IngestError::MalformedPayload(
                "header declares zero classes".into(),
            ));
        }
        Ok(NativeReader {
            inner,
            schema: DatasetSchema::new(num_classes, rgb_dim, audio_dim),
            offset: 4 + 1 + 12,
            failed: false,
        })
    }

    pub fn schema(&self) -> DatasetSchema {
        self.schema
    }

    fn read_exact_or_eof(&mut self, buf: &mut [u8], start: u64) -> Result<bool, IngestError> {
        let mut filled = 0;
        while filled < buf.len() {
            let n = self.inner.read(&mut buf[filled..])?;
            if n == 0 {
                if filled == 0 {
                    return Ok(false);
                }
                return Err(IngestError::TruncatedRecord { offset: start });
            }
            filled += n;
        }
        self.offset += buf.len() as u64;
        Ok(true)
    }

    fn read_record(&mut self) -> Result<Option<Example>, IngestError> {
        let start = self.offset;
        let mut half = [0u8; 2];
        if !self.read_exact_or_eof(&mut half, start)? {
            return Ok(None);
        }
        let id_len = u16::from_le_bytes(half) as usize;
        let mut id = vec![0u8; id_len];
        if !self.read_exact_or_eof(&mut id, start)? && id_len > 0 {
            return Err(IngestError::TruncatedRecord { offset: start });
        }
        let video_id = String::from_utf8(id)
            .map_err(|_| IngestError::MalformedPayload("video id is not UTF-8".into()))?;

        if !self.read_exact_or_eof(&mut half, start)? {
            return Err(IngestError::TruncatedRecord { offset: start });
        }
        let label_count = u16::from_le_bytes(half) as usize;
        let mut labels = std::collections::BTreeSet::new();
        let mut word = [0u8; 4];
        for _ in 0..label_count {
            if !self.read_exact_or_eof(&mut word, start)? {
                return Err(IngestError::TruncatedRecord { offset: start });
            }
            labels.insert(u32::from_le_bytes(word));
        }

        let read_floats = |n: usize, me: &mut Self| -> Result<Vec<f32>, IngestError> {
            let mut out = Vec::with_capacity(n);
            let mut word = [0u8; 4];
            for _ in 0..n {
                if !me.read_exact_or_eof(&mut word, start)? {
                    return Err(IngestError::TruncatedRecord { offset: start });
                }
                out.push(f32::from_le_bytes(word));
            }
            Ok(out)
        };
        let rgb = read_floats(self.schema.rgb_dim, self)?;
        let audio = read_floats(self.schema.audio_dim, self)?;

        let example = Example {
            video_id,
            labels,
            features: FeatureVector { rgb, audio },
        };
        validate_example(&example, &self.schema)?;
        Ok(Some(example))
    }
}

impl Iterator for NativeReader {
    type Item = Result<Example, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        match self.read_record() {
            Ok(Some(ex)) => Some(Ok(ex)),
            Ok(None) => None,
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}

/// Write a whole dataset to one native-format file.
pub fn write_native(
    path: impl AsRef<Path>,
    schema: DatasetSchema,
    examples: impl IntoIterator<Item = Example>,
) -> Result<u64, IngestError> {
    let mut writer = NativeWriter::create(path, schema)?;
    let mut count = 0;
    for ex in examples {
        writer.write_example(&ex)?;
        count += 1;
    }
    writer.finish()?;
    Ok(count)
}
