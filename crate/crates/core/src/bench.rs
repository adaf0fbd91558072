//! Performance harness for the large-file paths. The interesting scale
//! is 700,640 prediction rows — a full competition submission.
//!
//! Benchmarks never alter results: the timed region calls the same
//! [`parse_submission`], [`gap_at_k`](metrics::gap_at_k) and
//! [`average_files`](crate::ensemble::average_files) everything else
//! uses. Data generation and cleanup stay outside the clock.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use crate::datamodel::{PredictionList, DEFAULT_NUM_CLASSES};
use crate::ensemble;
use crate::metrics;
use crate::rng::{derive, SplitMix64};
use crate::submission::{parse_submission, SubmissionWriter};

#[derive(Clone, Debug)]
pub struct BenchResult {
    pub op: String,
    pub rows: usize,
    pub k: usize,
    pub threads: usize,
    /// Timed region only, in seconds.
    pub wall_time: f64,
    /// Input bytes the timed region consumed.
    pub bytes: u64,
    /// VmHWM of the process, best-effort (None off Linux).
    pub peak_memory: Option<u64>,
    pub gap: Option<f64>,
}

impl BenchResult {
    pub fn rows_per_sec(&self) -> f64 {
        self.rows as f64 / self.wall_time
    }

    pub fn bytes_per_sec(&self) -> f64 {
        self.bytes as f64 / self.wall_time
    }

    pub const CSV_HEADER: &'static str =
        "op,rows,k,threads,wall_s,rows_per_s,bytes_per_s,peak_mem_bytes,gap";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.0},{:.0},{},{}",
            self.op,
            self.rows,
            self.k,
            self.threads,
            self.wall_time,
            self.rows_per_sec(),
            self.bytes_per_sec(),
            self.peak_memory.map_or(String::new(), |b| b.to_string()),
            self.gap.map_or(String::new(), |g| g.to_string()),
        )
    }
}

impl fmt::Display for BenchResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} rows x {} in {:.3}s ({:.0} rows/s, {:.1} MB/s, {} threads",
            self.op,
            self.rows,
            self.k,
            self.wall_time,
            self.rows_per_sec(),
            self.bytes_per_sec() / 1e6,
            self.threads,
        )?;
        if let Some(peak) = self.peak_memory {
            write!(f, ", peak {:.0} MB", peak as f64 / 1e6)?;
        }
        if let Some(gap) = self.gap {
            write!(f, ", gap {gap:.5}")?;
        }
        write!(f, ")")
    }
}

/// Process high-water resident size in bytes, from /proc (Linux only).
pub fn peak_memory_bytes() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    for line in status.lines() {
        if let Some(rest) = line.strip_prefix("VmHWM:") {
            let kb: u64 = rest.trim().strip_suffix("kB")?.trim().parse().ok()?;
            return Some(kb * 1024);
        }
    }
    None
}

static SCRATCH_COUNTER: AtomicU64 = AtomicU64::new(0);

struct Scratch(PathBuf);

impl Scratch {
    fn new(tag: &str) -> io::Result<Self> {
        let n = SCRATCH_COUNTER.fetch_add(1, Ordering::Relaxed);
        let dir = std::env::temp_dir().join(format!("yt8m-bench-{tag}-{}-{n}", std::process::id()));
        fs::create_dir_all(&dir)?;
        Ok(Scratch(dir))
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.0);
    }
}

fn other(e: impl std::error::Error + Send + Sync + 'static) -> io::Error {
    io::Error::other(e)
}

/// Synthetic truth plus one submission file over the same videos. About
/// half of each video's true labels appear among its k prediction pairs,
/// so the GAP lands mid-range instead of degenerating to 0 or 1.
fn generate_eval_file(
    path: &Path,
    rows: usize,
    k: usize,
    seed: u64,
    truth: &mut HashMap<String, BTreeSet<u32>>,
) -> io::Result<()> {
    let classes = DEFAULT_NUM_CLASSES;
    let mut rng = SplitMix64::new(seed);
    let mut w = SubmissionWriter::with_rounding(BufWriter::new(File::create(path)?), true)
        .map_err(other)?;
    for v in 0..rows {
        let id = format!("vid{v:07}");
        let labels = truth.entry(id.clone()).or_insert_with(|| {
            let mut rng = SplitMix64::new(derive(seed, v as u64));
            let n = 1 + (rng.next_u64() % 4) as usize;
            let mut s = BTreeSet::new();
            while s.len() < n {
                s.insert((rng.next_u64() % classes as u64) as u32);
            }
            s
        });
        let mut picked = BTreeSet::new();
        for &l in labels.iter() {
            if picked.len() < k && rng.next_f64() < 0.5 {
                picked.insert(l);
            }
        }
        while picked.len() < k.min(classes as usize) {
            picked.insert((rng.next_u64() % classes as u64) as u32);
        }
        let pairs: Vec<(u32, f64)> = picked.iter().map(|&l| (l, rng.next_f64())).collect();
        let list = PredictionList::new(id, pairs).expect("generated labels are distinct");
        w.write_list(&list).map_err(other)?;
    }
    w.finish().map_err(other)?;
    Ok(())
}

/// Generate a truth set and a `rows`-video submission, then time
/// parse + GAP@k end to end.
pub fn bench_eval(rows: usize, k: usize, seed: u64) -> io::Result<BenchResult> {
    let scratch = Scratch::new("eval")?;
    let path = scratch.0.join("submission.csv");
    let mut truth = HashMap::new();
    generate_eval_file(&path, rows, k, seed, &mut truth)?;
    let bytes = fs::metadata(&path)?.len();

    let start = Instant::now();
    let lists: Vec<PredictionList> = parse_submission(&path, None)
        .map_err(other)?
        .collect::<Result<_, _>>()
        .map_err(other)?;
    let report = metrics::gap_at_k(&lists, &truth, k).map_err(other)?;
    let wall_time = start.elapsed().as_secs_f64();

    Ok(BenchResult {
        op: "eval".into(),
        rows,
        k,
        threads: rayon::current_num_threads(),
        wall_time,
        bytes,
        peak_memory: peak_memory_bytes(),
        gap: Some(report.gap),
    })
}

/// Generate `files` submissions over one video set, then time
/// `average_files` across them.
pub fn bench_avg_files(rows: usize, k: usize, files: usize, seed: u64) -> io::Result<BenchResult> {
    let scratch = Scratch::new("avg")?;
    let mut truth = HashMap::new();
    let mut paths = Vec::with_capacity(files);
    let mut bytes = 0;
    for f in 0..files {
        let path = scratch.0.join(format!("member{f}.csv"));
        generate_eval_file(&path, rows, k, derive(seed, f as u64), &mut truth)?;
        bytes += fs::metadata(&path)?.len();
        paths.push(path);
    }
    let out = scratch.0.join("averaged.csv");

    let start = Instant::now();
    ensemble::average_files(&paths, k, &out).map_err(other)?;
    let wall_time = start.elapsed().as_secs_f64();

    Ok(BenchResult {
        op: "avg-files".into(),
        rows,
        k,
        threads: rayon::current_num_threads(),
        wall_time,
        bytes,
        peak_memory: peak_memory_bytes(),
        gap: None,
    })
}
