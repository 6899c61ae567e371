//! CSV ingestion of recorded accelerometer streams.
//!
//! One CSV per sensor, rows aligned across files. The first file also carries
//! the label and subject columns. Contiguous runs of equal (subject, label)
//! become clips; clips are resampled to 50 Hz, windowed, split by subject and
//! z-scored with train-split statistics.

use std::collections::HashMap;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::preprocess::{resample_linear, sliding_windows};
use super::synth::normalize_train_fit;
use super::{Corpus, MultimodalWindow, Split, AXES, SAMPLE_RATE, WINDOW_LEN, WINDOW_STRIDE};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub axes: [String; 3],
    pub label: String,
    pub subject: String,
    pub sample_rate: f64,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            axes: ["x".into(), "y".into(), "z".into()],
            label: "label".into(),
            subject: "subject".into(),
            sample_rate: SAMPLE_RATE,
        }
    }
}

/// Subject-level split proportions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            val: 0.2,
            test: 0.2,
            seed: 0,
        }
    }
}

struct Stream {
    axes: [Vec<f64>; 3],
    labels: Vec<String>,
    subjects: Vec<String>,
}

fn ingest_err(file: &Path, line: u64, reason: impl Into<String>) -> Error {
    Error::Ingest {
        file: file.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

fn read_stream<R: Read>(name: &Path, reader: R, schema: &CsvSchema, with_meta: bool) -> Result<Stream> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| ingest_err(name, 1, e.to_string()))?.clone();
    let col = |want: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == want)
            .ok_or_else(|| ingest_err(name, 1, format!("missing column '{want}'")))
    };
    let axis_cols = [col(&schema.axes[0])?, col(&schema.axes[1])?, col(&schema.axes[2])?];
    let meta_cols = if with_meta {
        Some((col(&schema.label)?, col(&schema.subject)?))
    } else {
        None
    };
    let mut s = Stream {
        axes: [Vec::new(), Vec::new(), Vec::new()],
        labels: Vec::new(),
        subjects: Vec::new(),
    };
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            ingest_err(name, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        for (a, &c) in axis_cols.iter().enumerate() {
            let cell = rec.get(c).ok_or_else(|| ingest_err(name, line, format!("row lacks column {c}")))?;
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| ingest_err(name, line, format!("non-numeric value '{cell}' in column '{}'", schema.axes[a])))?;
            if !v.is_finite() {
                return Err(ingest_err(name, line, format!("non-finite value '{cell}'")));
            }
            s.axes[a].push(v);
        }
        if let Some((lc, sc)) = meta_cols {
            let get = |c: usize| rec.get(c).map(|v| v.trim().to_string()).ok_or_else(|| ingest_err(name, line, format!("row lacks column {c}")));
            s.labels.push(get(lc)?);
            s.subjects.push(get(sc)?);
        }
    }
    Ok(s)
}

/// Ingests aligned per-sensor CSV streams into a normalized, windowed corpus.
///
/// Labels missing from `label_names` are appended in order of appearance;
/// empty label cells produce unlabeled windows.
pub fn ingest_csv<R: Read>(
    sources: Vec<(PathBuf, R)>,
    schema: &CsvSchema,
    label_names: Vec<String>,
    split: &SplitFractions,
) -> Result<Corpus> {
    if sources.is_empty() {
        return Err(Error::Input("ingestion needs at least one sensor stream".into()));
    }
    if !(schema.sample_rate.is_finite() && schema.sample_rate > 0.0) {
        return Err(Error::Config(format!("invalid sample rate {}", schema.sample_rate)));
    }
    let mut streams = Vec::with_capacity(sources.len());
    for (i, (name, reader)) in sources.into_iter().enumerate() {
        streams.push((name.clone(), read_stream(&name, reader, schema, i == 0)?));
    }
    let rows = streams[0].1.axes[0].len();
    for (name, s) in &streams[1..] {
        if s.axes[0].len() != rows {
            return Err(ingest_err(
                name,
                s.axes[0].len().min(rows) as u64 + 2,
                format!("{} data rows, first stream has {rows}", s.axes[0].len()),
            ));
        }
    }
    let s_n = streams.len();
    let meta = &streams[0].1;

    let mut label_names = label_names;
    let mut label_ids: HashMap<String, u32> = label_names.iter().enumerate().map(|(i, n)| (n.clone(), i as u32)).collect();
    let mut subject_ids: HashMap<String, u32> = HashMap::new();
    let mut subject_order: Vec<u32> = Vec::new();

    // Contiguous (subject, label) runs.
    let mut segments: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    for r in 1..=rows {
        if r == rows || meta.labels[r] != meta.labels[start] || meta.subjects[r] != meta.subjects[start] {
            segments.push((start, r));
            start = r;
        }
    }
    if rows == 0 {
        segments.clear();
    }

    let mut corpus = Corpus::new(Vec::new(), s_n);
    let mut window_subjects = Vec::new();
    for (clip, &(a, b)) in segments.iter().enumerate() {
        let label_str = &meta.labels[a];
        let label = if label_str.is_empty() {
            None
        } else {
            Some(*label_ids.entry(label_str.clone()).or_insert_with(|| {
                label_names.push(label_str.clone());
                (label_names.len() - 1) as u32
            }))
        };
        let next_subject = subject_ids.len() as u32;
        let subject = *subject_ids.entry(meta.subjects[a].clone()).or_insert_with(|| {
            subject_order.push(next_subject);
            next_subject
        });

        // [axis][sensor][frame] at 50 Hz.
        let mut resampled: Vec<Vec<f64>> = Vec::with_capacity(AXES * s_n);
        for axis in 0..AXES {
            for (_, s) in &streams {
                resampled.push(resample_linear(&s.axes[axis][a..b], schema.sample_rate, SAMPLE_RATE)?);
            }
        }
        let frames = resampled[0].len();
        for off in sliding_windows(frames, WINDOW_LEN, WINDOW_STRIDE)? {
            let sensor = resampled.iter().flat_map(|row| row[off..off + WINDOW_LEN].iter().map(|&v| v as f32)).collect();
            corpus.windows.push(MultimodalWindow {
                text: None,
                video: None,
                pose: None,
                sensor: Some(sensor),
                label,
                subject,
                clip: clip as u32,
                split: Split::Train,
            });
            window_subjects.push(subject);
        }
    }
    corpus.label_names = label_names;

    let n = subject_order.len();
    let n_val = (split.val * n as f64).round() as usize;
    let n_test = (split.test * n as f64).round() as usize;
    let n_train = n.saturating_sub(n_val + n_test).max(1.min(n));
    let mut order = subject_order;
    let mut rng = ChaCha8Rng::seed_from_u64(split.seed);
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut split_of = vec![Split::Train; n];
    for (rank, &s) in order.iter().enumerate() {
        split_of[s as usize] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    for w in &mut corpus.windows {
        w.split = split_of[w.subject as usize];
    }
    normalize_train_fit(&mut corpus)?;
    corpus.validate()?;
    Ok(corpus)
}

/// File-path front end to [`ingest_csv`].
pub fn ingest_csv_files(
    paths: &[PathBuf],
    schema: &CsvSchema,
    label_names: Vec<String>,
    split: &SplitFractions,
) -> Result<Corpus> {
    let mut sources = Vec::with_capacity(paths.len());
    for p in paths {
        let f = File::open(p).map_err(|e| ingest_err(p, 0, e.to_string()))?;
        sources.push((p.clone(), std::io::BufReader::new(f)));
    }
    ingest_csv(sources, schema, label_names, split)
}
