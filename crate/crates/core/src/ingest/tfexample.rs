//! Minimal protobuf codec for the video-level `tf.Example` layout.
//!
//! Only the slice of the format this pipeline needs is implemented: an
//! `Example` holding a `Features` map (field 1), whose entries map a string
//! key to a `Feature` carrying exactly one of `BytesList` (field 1),
//! `FloatList` (field 2) or `Int64List` (field 3). Unknown fields and
//! unknown feature keys are skipped, packed and unpacked scalar lists are
//! both accepted, and encoding always produces packed lists with features
//! in a fixed order so output is deterministic.

use std::collections::BTreeSet;

use super::IngestError;
use crate::datamodel::{validate_example, DatasetSchema, Example, FeatureVector, ValidationError};

const WIRE_VARINT: u32 = 0;
const WIRE_I64: u32 = 1;
const WIRE_LEN: u32 = 2;
const WIRE_I32: u32 = 5;

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn done(&self) -> bool {
        self.pos >= self.buf.len()
    }

    fn read_varint(&mut self) -> Result<u64, IngestError> {
        let mut value = 0u64;
        let mut shift = 0u32;
        loop {
            let byte = *self
                .buf
                .get(self.pos)
                .ok_or_else(|| malformed("truncated varint"))?;
            self.pos += 1;
            if shift >= 64 {
                return Err(malformed("varint longer than 10 bytes"));
            }
            value |= u64::from(byte & 0x7F) << shift;
            if byte & 0x80 == 0 {
                return Ok(value);
            }
            shift += 7;
        }
    }

    fn read_tag(&mut self) -> Result<(u32, u32), IngestError> {
        let key = self.read_varint()?;
        let field = (key >> 3) as u32;
        let wire = (key & 0x7) as u32;
        if field == 0 {
            return Err(malformed("field number 0"));
        }
        Ok((field, wire))
    }

    fn read_bytes(&mut self, len: usize) -> Result<&'a [u8], IngestError> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| malformed("length-delimited field overruns buffer"))?;
        let slice = &self.buf[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn read_len_delimited(&mut self) -> Result<&'a [u8], IngestError> {
        let len = self.read_varint()? as usize;
        self.read_bytes(len)
    }

    fn skip(&mut self, wire: u32) -> Result<(), IngestError> {
        match wire {
            WIRE_VARINT => {
                self.read_varint()?;
            }
            WIRE_I64 => {
                self.read_bytes(8)?;
            }
            WIRE_LEN => {
                self.read_len_delimited()?;
            }
            WIRE_I32 => {
                self.read_bytes(4)?;
            }
            _ => return Err(malformed("unsupported wire type")),
        }
        Ok(())
    }
}

fn malformed(detail: &str) -> IngestError {
    IngestError::MalformedPayload(detail.to_string())
}

enum FeatureValue {
    Bytes(Vec<Vec<u8>>),
    Floats(Vec<f32>),
    Ints(Vec<i64>),
}

fn wrong_type(key: &str) -> IngestError {
    IngestError::WrongType(key.to_string())
}

fn decode_bytes_list(key: &str, buf: &[u8]) -> Result<Vec<Vec<u8>>, IngestError> {
    let mut cur = Cursor::new(buf);
    let mut out = Vec::new();
    while !cur.done() {
        let (field, wire) = cur.read_tag()?;
        match (field, wire) {
            (1, WIRE_LEN) => out.push(cur.read_len_delimited()?.to_vec()),
            (1, _) => return Err(wrong_type(key)),
            _ => cur.skip(wire)?,
        }
    }
    Ok(out)
}

fn decode_float_list(key: &str, buf: &[u8]) -> Result<Vec<f32>, IngestError> {
    let mut cur = Cursor::new(buf);
    let mut out = Vec::new();
    while !cur.done() {
        let (field, wire) = cur.read_tag()?;
        match (field, wire) {
            (1, WIRE_LEN) => {
                let packed = cur.read_len_delimited()?;
                if packed.len() % 4 != 0 {
                    return Err(malformed("packed float run is not a multiple of 4 bytes"));
                }
                out.extend(
                    packed
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
                );
            }
            (1, WIRE_I32) => {
                let raw = cur.read_bytes(4)?;
                out.push(f32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]));
            }
            (1, _) => return Err(wrong_type(key)),
            _ => cur.skip(wire)?,
        }
    }
    Ok(out)
}

fn decode_int64_list(key: &str, buf: &[u8]) -> Result<Vec<i64>, IngestError> {
    let mut cur = Cursor::new(buf);
    let mut out = Vec::new();
    while !cur.done() {
        let (field, wire) = cur.read_tag()?;
        match (field, wire) {
            (1, WIRE_LEN) => {
                let packed = cur.read_len_delimited()?;
                let mut inner = Cursor::new(packed);
                while !inner.done() {
                    out.push(inner.read_varint()? as i64);
                }
            }
            (1, WIRE_VARINT) => out.push(cur.read_varint()? as i64),
            (1, _) => return Err(wrong_type(key)),
            _ => cur.skip(wire)?,
        }
    }
    Ok(out)
}

/// Decode the `Feature` message of a consumed key. Exactly one of the three
/// list kinds must be present, and any unexpected wire type on a value
/// field is `WrongType` rather than silently skipped.
fn decode_feature(key: &str, buf: &[u8]) -> Result<FeatureValue, IngestError> {
    let mut cur = Cursor::new(buf);
    let mut value = None;
    while !cur.done() {
        let (field, wire) = cur.read_tag()?;
        if !(1..=3).contains(&field) {
            cur.skip(wire)?;
            continue;
        }
        if wire != WIRE_LEN {
            return Err(wrong_type(key));
        }
        let body = cur.read_len_delimited()?;
        let parsed = match field {
            1 => FeatureValue::Bytes(decode_bytes_list(key, body)?),
            2 => FeatureValue::Floats(decode_float_list(key, body)?),
            3 => FeatureValue::Ints(decode_int64_list(key, body)?),
            _ => unreachable!(),
        };
        if value.is_some() {
            return Err(wrong_type(key));
        }
        value = Some(parsed);
    }
    value.ok_or_else(|| wrong_type(key))
}

/// Walk an `Example` payload and return each feature entry's key and raw
/// `Feature` bytes. Bodies are left unparsed so that unknown keys never
/// have to decode.
fn collect_features<'a>(payload: &'a [u8]) -> Result<Vec<(String, &'a [u8])>, IngestError> {
    let mut out = Vec::new();
    let mut outer = Cursor::new(payload);
    while !outer.done() {
        let (field, wire) = outer.read_tag()?;
        if field != 1 || wire != WIRE_LEN {
            outer.skip(wire)?;
            continue;
        }
        let features_buf = outer.read_len_delimited()?;
        let mut features = Cursor::new(features_buf);
        while !features.done() {
            let (field, wire) = features.read_tag()?;
            if field != 1 || wire != WIRE_LEN {
                features.skip(wire)?;
                continue;
            }
            let entry_buf = features.read_len_delimited()?;
            let mut entry = Cursor::new(entry_buf);
            let mut key: Option<String> = None;
            let mut feature_body: Option<&[u8]> = None;
            while !entry.done() {
                let (field, wire) = entry.read_tag()?;
                match (field, wire) {
                    (1, WIRE_LEN) => {
                        let raw = entry.read_len_delimited()?;
                        let s = std::str::from_utf8(raw)
                            .map_err(|_| malformed("feature key is not UTF-8"))?;
                        key = Some(s.to_string());
                    }
                    (2, WIRE_LEN) => feature_body = Some(entry.read_len_delimited()?),
                    _ => entry.skip(wire)?,
                }
            }
            if let (Some(key), Some(body)) = (key, feature_body) {
                out.push((key, body));
            }
        }
    }
    Ok(out)
}

/// Decode one serialized `tf.Example` into a validated [`Example`].
pub fn decode_video_example(
    payload: &[u8],
    schema: &DatasetSchema,
) -> Result<Example, IngestError> {
    let mut video_id: Option<String> = None;
    let mut labels: Option<Vec<i64>> = None;
    let mut rgb: Option<Vec<f32>> = None;
    let mut audio: Option<Vec<f32>> = None;

    for (key, body) in collect_features(payload)? {
        if !matches!(
            key.as_str(),
            "video_id" | "labels" | "mean_rgb" | "mean_audio"
        ) {
            // Unknown feature keys are allowed; their bodies stay unparsed.
            continue;
        }
        match (key.as_str(), decode_feature(&key, body)?) {
            ("video_id", FeatureValue::Bytes(items)) => {
                let first = items
                    .into_iter()
                    .next()
                    .ok_or_else(|| IngestError::WrongType("video_id".into()))?;
                let id =
                    String::from_utf8(first).map_err(|_| malformed("video_id is not UTF-8"))?;
                video_id = Some(id);
            }
            ("labels", FeatureValue::Ints(items)) => labels = Some(items),
            ("mean_rgb", FeatureValue::Floats(items)) => rgb = Some(items),
            ("mean_audio", FeatureValue::Floats(items)) => audio = Some(items),
            _ => return Err(IngestError::WrongType(key)),
        }
    }

    let video_id = video_id.ok_or_else(|| IngestError::MissingFeature("video_id".into()))?;
    let labels = labels.ok_or_else(|| IngestError::MissingFeature("labels".into()))?;
    let rgb = rgb.ok_or_else(|| IngestError::MissingFeature("mean_rgb".into()))?;
    let audio = audio.ok_or_else(|| IngestError::MissingFeature("mean_audio".into()))?;

    let mut label_set = BTreeSet::new();
    for raw in labels {
        if raw < 0 || raw >= i64::from(schema.vocab.num_classes) {
            return Err(ValidationError::LabelOutOfRange {
                index: raw,
                num_classes: schema.vocab.num_classes,
            }
            .into());
        }
        label_set.insert(raw as u32);
    }

    let example = Example {
        video_id,
        labels: label_set,
        features: FeatureVector { rgb, audio },
    };
    validate_example(&example, schema)?;
    Ok(example)
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

fn write_varint(buf: &mut Vec<u8>, mut value: u64) {
    loop {
        let byte = (value & 0x7F) as u8;
        value >>= 7;
        if value == 0 {
            buf.push(byte);
            return;
        }
        buf.push(byte | 0x80);
    }
}

fn write_tag(buf: &mut Vec<u8>, field: u32, wire: u32) {
    write_varint(buf, u64::from(field) << 3 | u64::from(wire));
}

fn write_len_field(buf: &mut Vec<u8>, field: u32, body: &[u8]) {
    write_tag(buf, field, WIRE_LEN);
    write_varint(buf, body.len() as u64);
    buf.extend_from_slice(body);
}

fn bytes_feature(value: &[u8]) -> Vec<u8> {
    let mut list = Vec::new();
    write_len_field(&mut list, 1, value);
    let mut feature = Vec::new();
    write_len_field(&mut feature, 1, &list);
    feature
}

fn float_feature(values: impl Iterator<Item = f32>) -> Vec<u8> {
    let mut packed = Vec::new();
    for v in values {
        packed.extend_from_slice(&v.to_le_bytes());
    }
    let mut list = Vec::new();
    write_len_field(&mut list, 1, &packed);
    let mut feature = Vec::new();
    write_len_field(&mut feature, 2, &list);
    feature
}

fn int64_feature(values: impl Iterator<Item = i64>) -> Vec<u8> {
    let mut packed = Vec::new();
    for v in values {
        write_varint(&mut packed, v as u64);
    }
    let mut list = Vec::new();
    write_len_field(&mut list, 1, &packed);
    let mut feature = Vec::new();
    write_len_field(&mut feature, 3, &list);
    feature
}

fn map_entry(key: &str, feature: &[u8]) -> Vec<u8> {
    let mut entry = Vec::new();
    write_len_field(&mut entry, 1, key.as_bytes());
    write_len_field(&mut entry, 2, feature);
    entry
}

/// Serialize an [`Example`] as a `tf.Example` payload. Features are written
/// in a fixed order with packed scalar lists, so equal examples always
/// produce identical bytes.
pub fn encode_video_example(ex: &Example) -> Vec<u8> {
    let mut features = Vec::new();
    let entries = [
        map_entry("video_id", &bytes_feature(ex.video_id.as_bytes())),
        map_entry(
            "labels",
            &int64_feature(ex.labels.iter().map(|&l| i64::from(l))),
        ),
        map_entry("mean_rgb", &float_feature(ex.features.rgb.iter().copied())),
        map_entry(
            "mean_audio",
            &float_feature(ex.features.audio.iter().copied()),
        ),
    ];
    for entry in &entries {
        write_len_field(&mut features, 1, entry);
    }
    let mut payload = Vec::new();
    write_len_field(&mut payload, 1, &features);
    payload
}
