//! TOML experiment manifests and the grid runner that turns them into CSV reports.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::mean_std;
use crate::corpus::{corpus_read, Corpus, Modality, Split};
use crate::error::{Error, Result};
use crate::finetune::{experiment, write_runs_csv, FinetuneConfig, InputKind, RunResult, Scenario};
use crate::models::{Checkpoint, JointModel};
use crate::zeroshot::{build_label_table, corpus_label_embeddings, evaluate, read_label_csv};

pub const RAW_CSV: &str = "raw.csv";
pub const AGGREGATE_CSV: &str = "aggregate.csv";
pub const LONG_CSV: &str = "long.csv";
pub const ZEROSHOT_CSV: &str = "zeroshot.csv";
pub const FAILURES_CSV: &str = "failures.csv";

/// Where the evaluated representations come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mujo,
    Simclr,
    Multitask,
    Autoencoder,
    /// No pre-training.
    Baseline,
}

/// Cartesian fine-tuning grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub inputs: Vec<InputKind>,
    pub scenarios: Vec<Scenario>,
    pub fractions: Vec<f64>,
    pub include_null: Vec<bool>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            inputs: Vec::new(),
            scenarios: Vec::new(),
            fractions: vec![1.0],
            include_null: vec![true],
        }
    }
}

/// Zero-shot cells: one per (modality, include_null).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZeroShotGrid {
    pub modalities: Vec<Modality>,
    pub include_null: Vec<bool>,
    /// Label embeddings; the corpus text embeddings are used when absent.
    pub labels_csv: Option<PathBuf>,
    pub ks: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub corpus: PathBuf,
    /// Dataset name written to reports; defaults to the corpus file stem.
    #[serde(default)]
    pub dataset: Option<String>,
    /// Merged in order; the first file providing a tensor wins.
    #[serde(default)]
    pub checkpoints: Vec<PathBuf>,
    pub method: Method,
    #[serde(default)]
    pub grid: Grid,
    #[serde(default)]
    pub zeroshot: ZeroShotGrid,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Fine-tuning settings other than the grid axes.
    #[serde(default)]
    pub finetune: FinetuneConfig,
}

fn default_repetitions() -> usize {
    20
}

impl ExperimentManifest {
    /// Parses a manifest; relative paths are resolved against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut m: Self = toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut m.corpus);
        fix(&mut m.output_dir);
        m.checkpoints.iter_mut().for_each(fix);
        if let Some(p) = m.zeroshot.labels_csv.as_mut() {
            fix(p);
        }
        Ok(m)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn dataset_name(&self) -> String {
        self.dataset.clone().unwrap_or_else(|| {
            self.corpus
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "corpus".into())
        })
    }

    /// Fine-tuning cells in grid order.
    pub fn finetune_cells(&self) -> Vec<FinetuneConfig> {
        let g = &self.grid;
        let mut cells = Vec::new();
        for &input in &g.inputs {
            for &scenario in &g.scenarios {
                for &fraction in &g.fractions {
                    for &include_null in &g.include_null {
                        cells.push(FinetuneConfig {
                            scenario,
                            input,
                            fraction,
                            include_null,
                            repetitions: self.repetitions,
                            seed: self.seed,
                            ..self.finetune.clone()
                        });
                    }
                }
            }
        }
        cells
    }
}

/// Merges checkpoint files; later files only add tensors the earlier ones lack.
pub fn merge_checkpoints(paths: &[PathBuf]) -> Result<Option<Checkpoint>> {
    let mut merged: Option<Checkpoint> = None;
    for p in paths {
        let ck = Checkpoint::read(p)?;
        match merged.as_mut() {
            None => merged = Some(ck),
            Some(m) => {
                for (name, t) in ck.tensors {
                    if m.get(&name).is_none() {
                        m.tensors.push((name, t));
                    }
                }
            }
        }
    }
    Ok(merged)
}

/// One aggregated fine-tuning cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub input: InputKind,
    pub scenario: Scenario,
    pub fraction: f64,
    pub include_null: bool,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZeroShotRow {
    pub modality: Modality,
    pub include_null: bool,
    pub k: usize,
    pub accuracy: f64,
}

/// Everything a manifest run produced; also written to the output directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ManifestReport {
    pub runs: Vec<RunResult>,
    pub cells: Vec<CellSummary>,
    pub zeroshot: Vec<ZeroShotRow>,
    /// `(cell description, error message)`.
    pub failures: Vec<(String, String)>,
}

impl ManifestReport {
    pub fn succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Runs every cell; a failing cell is recorded and the rest continue.
pub fn run_manifest(m: &ExperimentManifest) -> Result<ManifestReport> {
    let corpus = corpus_read(&m.corpus)?;
    let checkpoint = merge_checkpoints(&m.checkpoints)?;
    let mut report = ManifestReport::default();

    for cell in m.finetune_cells() {
        let name = format!(
            "finetune input={} scenario={} fraction={} include_null={}",
            cell.input, cell.scenario, cell.fraction, cell.include_null
        );
        log::info!("{name}");
        match experiment(&corpus, checkpoint.as_ref(), &cell) {
            Ok(res) => {
                report.cells.push(CellSummary {
                    input: cell.input,
                    scenario: cell.scenario,
                    fraction: cell.fraction,
                    include_null: cell.include_null,
                    mean: res.mean,
                    std: res.std,
                    n: res.runs.len(),
                });
                report.runs.extend(res.runs);
            }
            Err(e) => report.failures.push((name, e.to_string())),
        }
    }

    let ks = if m.zeroshot.ks.is_empty() { vec![1, 3, 5] } else { m.zeroshot.ks.clone() };
    let nulls = if m.zeroshot.include_null.is_empty() { vec![false] } else { m.zeroshot.include_null.clone() };
    for &modality in &m.zeroshot.modalities {
        for &include_null in &nulls {
            let name = format!("zeroshot modality={modality} include_null={include_null}");
            match zeroshot_cell(&corpus, checkpoint.as_ref(), m.zeroshot.labels_csv.as_deref(), modality, include_null, &ks) {
                Ok(rows) => report.zeroshot.extend(rows),
                Err(e) => report.failures.push((name, e.to_string())),
            }
        }
    }

    write_report(&m.dataset_name(), &report, &m.output_dir)?;
    Ok(report)
}

fn zeroshot_cell(
    corpus: &Corpus,
    checkpoint: Option<&Checkpoint>,
    labels_csv: Option<&Path>,
    modality: Modality,
    include_null: bool,
    ks: &[usize],
) -> Result<Vec<ZeroShotRow>> {
    let ck = checkpoint.ok_or_else(|| Error::Config("zero-shot evaluation needs a checkpoint".into()))?;
    let model = JointModel::from_checkpoint(ck)?;
    let (names, embeddings) = match labels_csv {
        Some(p) => read_label_csv(p)?,
        None => corpus_label_embeddings(corpus)?,
    };
    let table = build_label_table(&names, &embeddings, include_null)?;
    let test: Vec<_> = corpus.split(Split::Test).collect();
    let rep = evaluate(&model, corpus, &test, modality, &table, ks)?;
    Ok(rep
        .top_k
        .into_iter()
        .map(|(k, accuracy)| ZeroShotRow {
            modality,
            include_null,
            k,
            accuracy,
        })
        .collect())
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

/// Writes the raw, aggregate, long-format, zero-shot and failure CSVs.
pub fn write_report(dataset: &str, report: &ManifestReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut raw = Vec::new();
    write_runs_csv(dataset, &report.runs, &mut raw)?;
    write_atomic(&dir.join(RAW_CSV), &raw)?;

    let agg = csv_bytes(
        &["dataset", "input", "scenario", "fraction", "include_null", "mean", "std", "n"],
        report.cells.iter().map(|c| {
            vec![
                dataset.to_string(),
                c.input.to_string(),
                c.scenario.to_string(),
                c.fraction.to_string(),
                c.include_null.to_string(),
                c.mean.to_string(),
                c.std.to_string(),
                c.n.to_string(),
            ]
        }),
    )?;
    write_atomic(&dir.join(AGGREGATE_CSV), &agg)?;

    let finetune_rows = report.runs.iter().map(|r| {
        vec![
            dataset.to_string(),
            "finetune".into(),
            r.input.to_string(),
            r.scenario.to_string(),
            r.fraction.to_string(),
            r.include_null.to_string(),
            r.seed.to_string(),
            "macro_f1".into(),
            r.macro_f1.to_string(),
        ]
    });
    let zeroshot_rows = report.zeroshot.iter().map(|z| {
        vec![
            dataset.to_string(),
            "zeroshot".into(),
            z.modality.to_string(),
            String::new(),
            String::new(),
            z.include_null.to_string(),
            String::new(),
            format!("top{}", z.k),
            z.accuracy.to_string(),
        ]
    });
    let long = csv_bytes(
        &["dataset", "task", "input", "scenario", "fraction", "include_null", "run_seed", "metric", "value"],
        finetune_rows.chain(zeroshot_rows),
    )?;
    write_atomic(&dir.join(LONG_CSV), &long)?;

    let zs = csv_bytes(
        &["dataset", "modality", "include_null", "k", "accuracy"],
        report.zeroshot.iter().map(|z| {
            vec![
                dataset.to_string(),
                z.modality.to_string(),
                z.include_null.to_string(),
                z.k.to_string(),
                z.accuracy.to_string(),
            ]
        }),
    )?;
    write_atomic(&dir.join(ZEROSHOT_CSV), &zs)?;

    let failures = csv_bytes(&["cell", "error"], report.failures.iter().map(|(c, e)| vec![c.clone(), e.clone()]))?;
    write_atomic(&dir.join(FAILURES_CSV), &failures)?;
    Ok(())
}

/// Recomputes per-cell mean and std from raw rows, keyed by grid coordinates.
pub fn aggregate_runs(runs: &[RunResult]) -> Vec<CellSummary> {
    let mut cells: Vec<CellSummary> = Vec::new();
    let mut scores: Vec<Vec<f64>> = Vec::new();
    for r in runs {
        let idx = cells
            .iter()
            .position(|c| c.input == r.input && c.scenario == r.scenario && c.fraction == r.fraction && c.include_null == r.include_null);
        let i = idx.unwrap_or_else(|| {
            cells.push(CellSummary {
                input: r.input,
                scenario: r.scenario,
                fraction: r.fraction,
                include_null: r.include_null,
                mean: 0.0,
                std: 0.0,
                n: 0,
            });
            scores.push(Vec::new());
            cells.len() - 1
        });
        scores[i].push(r.macro_f1);
    }
    for (c, s) in cells.iter_mut().zip(&scores) {
        (c.mean, c.std) = mean_std(s);
        c.n = s.len();
    }
    cells
}
