//! TFRecord container framing.
//!
//! Each record is laid out as:
//!
//! ```text
//! u64 LE  payload length
//! u32 LE  masked crc32c of the 8 length bytes
//! [u8]    payload
//! u32 LE  masked crc32c of the payload
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::crc32c::masked_crc32c;
use super::IngestError;

pub struct TfRecordWriter<W: Write> {
    inner: W,
}

impl TfRecordWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>) -> Result<Self, IngestError> {
        Ok(TfRecordWriter::new(BufWriter::new(File::create(path)?)))
    }
}

impl<W: Write> TfRecordWriter<W> {
    pub fn new(inner: W) -> Self {
        TfRecordWriter { inner }
    }

    pub fn write_record(&mut self, payload: &[u8]) -> Result<(), IngestError> {
        let len_bytes = (payload.len() as u64).to_le_bytes();
        self.inner.write_all(&len_bytes)?;
        self.inner
            .write_all(&masked_crc32c(&len_bytes).to_le_bytes())?;
        self.inner.write_all(payload)?;
        self.inner
            .write_all(&masked_crc32c(payload).to_le_bytes())?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, IngestError> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Streaming reader. Yields raw payloads; both CRCs are verified and a
/// mismatch or short read is reported with the byte offset at which the
/// offending record starts.
pub struct TfRecordReader<R: Read> {
    inner: R,
    offset: u64,
    failed: bool,
}

pub fn read_tfrecord_stream(
    path: impl AsRef<Path>,
) -> Result<TfRecordReader<BufReader<File>>, IngestError> {
    Ok(TfRecordReader::new(BufReader::new(File::open(path)?)))
}

impl<R: Read> TfRecordReader<R> {
    pub fn new(inner: R) -> Self {
        TfRecordReader {
            inner,
            offset: 0,
            failed: false,
        }
    }

    /// Fill `buf`, distinguishing clean EOF (nothing read) from a torn
    /// record (something read, then EOF).
    fn read_exact_or_eof(&mut self, buf: &mut [u8]) -> Result<bool, IngestError> {
        let mut filled = 0;
        while filled < buf.len() {
            let n = self.inner.read(&mut buf[filled..])?;
            if n == 0 {
                if filled == 0 {
                    return Ok(false);
                }
                return Err(IngestError::TruncatedRecord {
                    offset: self.offset,
                });
            }
            filled += n;
        }
        Ok(true)
    }

    fn read_record(&mut self) -> Result<Option<Vec<u8>>, IngestError> {
        let record_start = self.offset;
        let mut len_bytes = [0u8; 8];
        if !self.read_exact_or_eof(&mut len_bytes)? {
            return Ok(None);
        }

        let mut crc_bytes = [0u8; 4];
        if self.inner.read_exact(&mut crc_bytes).is_err() {
            return Err(IngestError::TruncatedRecord {
                offset: record_start,
            });
        }
        if u32::from_le_bytes(crc_bytes) != masked_crc32c(&len_bytes) {
            return Err(IngestError::CrcMismatch {
                offset: record_start,
            });
        }

        let len = u64::from_le_bytes(len_bytes) as usize;
        let mut payload = vec![0u8; len];
        if self.inner.read_exact(&mut payload).is_err() {
            return Err(IngestError::TruncatedRecord {
                offset: record_start,
            });
        }
        if self.inner.read_exact(&mut crc_bytes).is_err() {
            return Err(IngestError::TruncatedRecord {
                offset: record_start,
            });
        }
        if u32::from_le_bytes(crc_bytes) != masked_crc32c(&payload) {
            return Err(IngestError::CrcMismatch {
                offset: record_start,
            });
        }

        self.offset += 8 + 4 + len as u64 + 4;
        Ok(Some(payload))
    }
}

impl<R: Read> Iterator for TfRecordReader<R> {
    type Item = Result<Vec<u8>, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        match self.read_record() {
            Ok(Some(payload)) => Some(Ok(payload)),
            Ok(None) => None,
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_records(payloads: &[&[u8]]) -> Vec<u8> {
        let mut w = TfRecordWriter::new(Vec::new());
        for p in payloads {
            w.write_record(p).unwrap();
        }
        w.finish().unwrap()
    }

    #[test]
    fn round_trip() {
        let payloads: Vec<&[u8]> = vec![b"", b"a", b"hello world", &[0u8; 300]];
        let bytes = write_records(&payloads);
        let got: Vec<Vec<u8>> = TfRecordReader::new(&bytes[..])
            .collect::<Result<_, _>>()
            .unwrap();
        assert_eq!(got.len(), payloads.len());
        for (g, p) in got.iter().zip(&payloads) {
            assert_eq!(g.as_slice(), *p);
        }
    }

    #[test]
    fn framing_layout() {
        let bytes = write_records(&[b"abc"]);
        assert_eq!(bytes.len(), 8 + 4 + 3 + 4);
        assert_eq!(&bytes[0..8], &3u64.to_le_bytes());
        assert_eq!(
            &bytes[8..12],
            &masked_crc32c(&3u64.to_le_bytes()).to_le_bytes()
        );
        assert_eq!(&bytes[12..15], b"abc");
        assert_eq!(&bytes[15..19], &masked_crc32c(b"abc").to_le_bytes());
    }

    #[test]
    fn bit_flip_anywhere_is_caught() {
        let bytes = write_records(&[b"payload one", b"payload two"]);
        for byte_idx in 0..bytes.len() {
            let mut corrupt = bytes.clone();
            corrupt[byte_idx] ^= 0x10;
            let result: Result<Vec<Vec<u8>>, _> = TfRecordReader::new(&corrupt[..]).collect();
            // Every flip lands in a region covered by one of the two CRCs,
            // and the length CRC is checked before the length is trusted.
            match result {
                Err(IngestError::CrcMismatch { .. }) => {}
                other => panic!("flip at byte {byte_idx} gave {other:?}"),
            }
        }
    }

    #[test]
    fn truncated_tail_is_reported_with_offset() {
        let bytes = write_records(&[b"first", b"second"]);
        let first_len = 8 + 4 + 5 + 4;
        let cut = &bytes[..first_len + 3];
        let mut reader = TfRecordReader::new(cut);
        assert_eq!(reader.next().unwrap().unwrap(), b"first");
        match reader.next().unwrap() {
            Err(IngestError::TruncatedRecord { offset }) => {
                assert_eq!(offset, first_len as u64)
            }
            other => panic!("expected truncation, got {other:?}"),
        }
        assert!(reader.next().is_none(), "reader stops after an error");
    }

    #[test]
    fn empty_stream_yields_nothing() {
        assert!(TfRecordReader::new(&b""[..]).next().is_none());
    }
}
