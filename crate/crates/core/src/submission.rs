//! Submission CSV files: a bit-exact writer and a strict streaming parser.
//!
//! Dialect: one header line `VideoId,LabelConfidencePairs`, then one row
//! per video, `<id>,<label> <conf> <label> <conf> ...` with pairs in
//! confidence-descending order. A malformed submission scores zero on the
//! leaderboard, so the parser rejects rather than repairs.

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::datamodel::{PredictionList, ValidationError, Vocabulary};

pub const HEADER: &str = "VideoId,LabelConfidencePairs";

#[derive(Debug, thiserror::Error)]
pub enum SubmissionError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad header {0:?}, expected {HEADER:?}")]
    BadHeader(String),
    #[error("line {0}: row is not `<video_id>,<pairs>`")]
    MalformedRow(u64),
    #[error("line {0}: odd number of pair tokens")]
    OddTokenCount(u64),
    #[error("line {0}: token {1:?} is not a number")]
    BadNumber(u64, String),
    #[error("line {0}: duplicate label in row")]
    DuplicateLabel(u64),
    #[error("duplicate video {0:?}")]
    DuplicateVideo(String),
    #[error("line {0}: label {1} outside the vocabulary")]
    LabelOutOfRange(u64, u32),
}

/// Format a confidence: shortest decimal that round-trips by default, or
/// at most six fractional digits when rounding is on.
fn format_confidence(c: f64, round6: bool) -> String {
    if !round6 {
        return format!("{c}");
    }
    let mut s = format!("{c:.6}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    s
}

pub struct SubmissionWriter<W: Write> {
    w: W,
    seen: HashSet<String>,
    rows: usize,
    round6: bool,
}

impl<W: Write> SubmissionWriter<W> {
    pub fn new(w: W) -> Result<Self, SubmissionError> {
        Self::with_rounding(w, false)
    }

    /// `round6` caps confidences at six fractional digits.
    pub fn with_rounding(mut w: W, round6: bool) -> Result<Self, SubmissionError> {
        writeln!(w, "{HEADER}")?;
        Ok(SubmissionWriter {
            w,
            seen: HashSet::new(),
            rows: 0,
            round6,
        })
    }

    pub fn write_list(&mut self, list: &PredictionList) -> Result<(), SubmissionError> {
        if !self.seen.insert(list.video_id().to_string()) {
            return Err(SubmissionError::DuplicateVideo(list.video_id().to_string()));
        }
        write!(self.w, "{},", list.video_id())?;
        for (i, &(label, conf)) in list.pairs().iter().enumerate() {
            if i > 0 {
                self.w.write_all(b" ")?;
            }
            write!(self.w, "{label} {}", format_confidence(conf, self.round6))?;
        }
        self.w.write_all(b"\n")?;
        self.rows += 1;
        Ok(())
    }

    /// Flush and return the number of data rows written.
    pub fn finish(mut self) -> Result<usize, SubmissionError> {
        self.w.flush()?;
        Ok(self.rows)
    }
}

pub fn write_submission<'a>(
    path: impl AsRef<Path>,
    lists: impl IntoIterator<Item = &'a PredictionList>,
    round6: bool,
) -> Result<usize, SubmissionError> {
    let file = BufWriter::new(File::create(path)?);
    let mut w = SubmissionWriter::with_rounding(file, round6)?;
    for list in lists {
        w.write_list(list)?;
    }
    w.finish()
}

/// Streaming parser; yields rows in file order. Holds one row plus the
/// set of seen video ids — never the whole file.
pub struct SubmissionReader<R: BufRead> {
    r: R,
    line_no: u64,
    seen: HashSet<String>,
    vocab: Option<Vocabulary>,
    buf: String,
    failed: bool,
}

impl<R: BufRead> SubmissionReader<R> {
    pub fn new(mut r: R, vocab: Option<Vocabulary>) -> Result<Self, SubmissionError> {
        let mut header = String::new();
        r.read_line(&mut header)?;
        let got = header.trim_end_matches('\n').trim_end_matches('\r');
        if got != HEADER {
            return Err(SubmissionError::BadHeader(got.to_string()));
        }
        Ok(SubmissionReader {
            r,
            line_no: 1,
            seen: HashSet::new(),
            vocab,
            buf: String::new(),
            failed: false,
        })
    }

    fn parse_row(&mut self, line: &str) -> Result<PredictionList, SubmissionError> {
        let n = self.line_no;
        let (video_id, rest) = line
            .split_once(',')
            .ok_or(SubmissionError::MalformedRow(n))?;
        let tokens: Vec<&str> = rest.split_whitespace().collect();
        if tokens.len() % 2 != 0 {
            return Err(SubmissionError::OddTokenCount(n));
        }
        let mut pairs = Vec::with_capacity(tokens.len() / 2);
        for pair in tokens.chunks(2) {
            let label: u32 = pair[0]
                .parse()
                .map_err(|_| SubmissionError::BadNumber(n, pair[0].to_string()))?;
            let conf: f64 = pair[1]
                .parse()
                .map_err(|_| SubmissionError::BadNumber(n, pair[1].to_string()))?;
            if let Some(v) = &self.vocab {
                if !v.contains(label) {
                    return Err(SubmissionError::LabelOutOfRange(n, label));
                }
            }
            pairs.push((label, conf.clamp(0.0, 1.0)));
        }
        let list = PredictionList::new(video_id, pairs).map_err(|e| match e {
            ValidationError::DuplicateLabel(_) => SubmissionError::DuplicateLabel(n),
            _ => SubmissionError::MalformedRow(n),
        })?;
        if !self.seen.insert(list.video_id().to_string()) {
            return Err(SubmissionError::DuplicateVideo(list.video_id().to_string()));
        }
        Ok(list)
    }
}

impl<R: BufRead> Iterator for SubmissionReader<R> {
    type Item = Result<PredictionList, SubmissionError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        self.buf.clear();
        match self.r.read_line(&mut self.buf) {
            Ok(0) => None,
            Ok(_) => {
                self.line_no += 1;
                let line = std::mem::take(&mut self.buf);
                let trimmed = line.trim_end_matches('\n').trim_end_matches('\r');
                if trimmed.is_empty() {
                    // One blank line is tolerated at end-of-file only; it
                    // cannot carry predictions. Blank anywhere else is a
                    // malformed row.
                    return match self.r.fill_buf() {
                        Ok([]) => None,
                        Ok(_) => {
                            self.failed = true;
                            Some(Err(SubmissionError::MalformedRow(self.line_no)))
                        }
                        Err(e) => {
                            self.failed = true;
                            Some(Err(e.into()))
                        }
                    };
                }
                let result = self.parse_row(trimmed);
                if result.is_err() {
                    self.failed = true;
                }
                Some(result)
            }
            Err(e) => {
                self.failed = true;
                Some(Err(e.into()))
            }
        }
    }
}

pub fn parse_submission(
    path: impl AsRef<Path>,
    vocab: Option<Vocabulary>,
) -> Result<SubmissionReader<BufReader<File>>, SubmissionError> {
    SubmissionReader::new(BufReader::new(File::open(path)?), vocab)
}
