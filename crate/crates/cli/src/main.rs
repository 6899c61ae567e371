//! `mujo` command-line driver.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mujo::baselines::{baseline_pretrain, BaselineConfig, BaselineMethod};
use mujo::corpus::{
    corpus_read, corpus_write, ingest_csv_files, synth_generate, Corpus, CsvSchema, Modality, Split, SplitFractions,
    SynthConfig, MAGIC,
};
use mujo::finetune::{experiment, write_runs_csv, FinetuneConfig, InputKind, Scenario};
use mujo::harness::{run_manifest, ExperimentManifest, FAILURES_CSV};
use mujo::models::{Checkpoint, JointModel, CHECKPOINT_MAGIC};
use mujo::pretrain::{pretrain_loop, write_metrics_csv, PretrainConfig};
use mujo::zeroshot::{build_label_table, corpus_label_embeddings, evaluate, read_label_csv};
use mujo::{Error, Result};

/// `println!` that reports a closed stdout as an error instead of panicking.
macro_rules! out {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout(), $($arg)*)?
    };
}

#[derive(Parser, Debug)]
#[command(name = "mujo", version, about = "Multimodal joint-embedding pre-training and evaluation for activity recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic multimodal corpus.
    Synth(SynthArgs),
    /// Build a sensor-only corpus from accelerometer CSV files.
    Ingest(IngestArgs),
    /// Pre-train a joint model or a proxy-task baseline.
    Pretrain(PretrainArgs),
    /// Fine-tune classifiers and report Macro F1.
    Finetune(FinetuneArgs),
    /// Zero-shot classification against label text embeddings.
    Zeroshot(ZeroshotArgs),
    /// Run an experiment manifest.
    Report {
        manifest: PathBuf,
    },
    /// Print the header of a corpus or checkpoint file.
    Inspect {
        path: PathBuf,
    },
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// TOML file with synthetic-corpus settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    clips: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    /// Pose joints that carry a virtual sensor.
    #[arg(long, value_delimiter = ',')]
    sensors: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// One CSV per sensor; the first also supplies label and subject columns.
    #[arg(long, required = true, value_delimiter = ',')]
    files: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Sampling rate of the files in Hz.
    #[arg(long, default_value_t = 50.0)]
    rate: f64,
    #[arg(long, default_value_t = 0.2)]
    val: f64,
    #[arg(long, default_value_t = 0.2)]
    test: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "mujo", value_parser = ["mujo", "simclr", "multitask", "autoencoder"])]
    method: String,
    #[arg(long, value_delimiter = ',', default_value = "text,video,pose,sensor")]
    modalities: Vec<Modality>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    /// Per-epoch metrics CSV; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "baseline")]
    scenario: Scenario,
    #[arg(long, default_value = "sensor")]
    input: InputKind,
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
    /// Keep NULL-labeled windows.
    #[arg(long)]
    null: bool,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Per-run CSV; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ZeroshotArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "sensor")]
    modality: Modality,
    /// `label, v1, ..., v1536` rows; the corpus text embeddings are used when absent.
    #[arg(long)]
    labels_csv: Option<PathBuf>,
    /// Append a NULL entry equal to the mean label embedding.
    #[arg(long)]
    null: bool,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    k: Vec<usize>,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    split: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Ingest(a) => ingest(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Finetune(a) => finetune(a),
        Command::Zeroshot(a) => zeroshot(a),
        Command::Report { manifest } => report(&manifest),
        Command::Inspect { path } => inspect(&path),
    }
}

fn synth(a: SynthArgs) -> Result<u8> {
    let mut cfg = match &a.config {
        Some(p) => toml::from_str(&fs::read_to_string(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => SynthConfig::default(),
    };
    if let Some(v) = a.classes {
        cfg.n_classes = v;
    }
    if let Some(v) = a.clips {
        cfg.clips_per_class = v;
    }
    if let Some(v) = a.frames {
        cfg.frames_per_clip = v;
    }
    if let Some(v) = a.sensors {
        cfg.sensor_joints = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let corpus = synth_generate(&cfg)?;
    corpus_write(&corpus, &a.out)?;
    print_corpus(&corpus)?;
    Ok(0)
}

fn ingest(a: IngestArgs) -> Result<u8> {
    let schema = CsvSchema {
        sample_rate: a.rate,
        ..CsvSchema::default()
    };
    let split = SplitFractions {
        val: a.val,
        test: a.test,
        seed: a.seed,
    };
    let corpus = ingest_csv_files(&a.files, &schema, Vec::new(), &split)?;
    corpus_write(&corpus, &a.out)?;
    print_corpus(&corpus)?;
    Ok(0)
}

fn pretrain(a: PretrainArgs) -> Result<u8> {
    let corpus = corpus_read(&a.corpus)?;
    let (ck, history) = if a.method == "mujo" {
        let mut cfg = PretrainConfig {
            modalities: a.modalities.clone(),
            seed: a.seed,
            ..Default::default()
        };
        override_opt(&mut cfg.max_epochs, a.epochs);
        override_opt(&mut cfg.batch_size, a.batch_size);
        override_opt(&mut cfg.patience, a.patience);
        override_opt(&mut cfg.tau, a.tau);
        let out = pretrain_loop(&corpus, &cfg)?;
        out!(
            "initial val loss {:.5}, best {:.5} at epoch {}",
            out.initial_val_loss, out.best_val_loss, out.best_epoch
        );
        (out.checkpoint(), out.history)
    } else {
        let method: BaselineMethod = a.method.parse()?;
        let mut cfg = BaselineConfig {
            method,
            seed: a.seed,
            ..Default::default()
        };
        override_opt(&mut cfg.max_epochs, a.epochs);
        override_opt(&mut cfg.batch_size, a.batch_size);
        override_opt(&mut cfg.patience, a.patience);
        override_opt(&mut cfg.tau, a.tau);
        let out = baseline_pretrain(&corpus, &cfg)?;
        out!(
            "initial val objective {:.5}, best {:.5} at epoch {}",
            out.initial_val_loss, out.best_val_loss, out.best_epoch
        );
        (out.checkpoint(), out.history)
    };
    ck.write(&a.out)?;
    let metrics = a.metrics.unwrap_or_else(|| a.out.with_extension("csv"));
    write_metrics_csv(&history, &metrics)?;
    out!("wrote {} and {}", a.out.display(), metrics.display());
    Ok(0)
}

fn override_opt<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn finetune(a: FinetuneArgs) -> Result<u8> {
    let corpus = corpus_read(&a.corpus)?;
    let ck = a.checkpoint.as_ref().map(Checkpoint::read).transpose()?;
    let mut cfg = FinetuneConfig {
        scenario: a.scenario,
        input: a.input,
        fraction: a.fraction,
        include_null: a.null,
        repetitions: a.reps,
        seed: a.seed,
        ..Default::default()
    };
    override_opt(&mut cfg.max_epochs, a.epochs);
    override_opt(&mut cfg.patience, a.patience);
    let res = experiment(&corpus, ck.as_ref(), &cfg)?;
    let dataset = dataset_name(&a.corpus);
    match &a.out {
        Some(p) => write_runs_csv(&dataset, &res.runs, fs::File::create(p)?)?,
        None => write_runs_csv(&dataset, &res.runs, std::io::stdout().lock())?,
    }
    eprintln!(
        "{} {} fraction {}: macro F1 {:.4} ± {:.4} over {} runs",
        cfg.input,
        cfg.scenario,
        cfg.fraction,
        res.mean,
        res.std,
        res.runs.len()
    );
    Ok(0)
}

fn zeroshot(a: ZeroshotArgs) -> Result<u8> {
    let corpus = corpus_read(&a.corpus)?;
    let ck = Checkpoint::read(&a.checkpoint)?;
    let model = JointModel::from_checkpoint(&ck)?;
    let (names, embeddings) = match &a.labels_csv {
        Some(p) => read_label_csv(p)?,
        None => corpus_label_embeddings(&corpus)?,
    };
    let table = build_label_table(&names, &embeddings, a.null)?;
    let split = match a.split.as_str() {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => return Err(Error::Input(format!("unknown split '{other}'"))),
    };
    let windows: Vec<_> = corpus.split(split).collect();
    let rep = evaluate(&model, &corpus, &windows, a.modality, &table, &a.k)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "modality,k,accuracy")?;
    for (k, acc) in rep.top_k {
        writeln!(out, "{},{k},{acc}", rep.modality)?;
    }
    Ok(0)
}

fn report(path: &Path) -> Result<u8> {
    let m = ExperimentManifest::read(path)?;
    let rep = run_manifest(&m)?;
    for c in &rep.cells {
        out!(
            "{:<10} {:<20} fraction {:<6} null {:<5} {:.4} ± {:.4} (n={})",
            c.input.to_string(),
            c.scenario.to_string(),
            c.fraction,
            c.include_null,
            c.mean,
            c.std,
            c.n
        );
    }
    for z in &rep.zeroshot {
        out!("zeroshot {:<7} null {:<5} top{} {:.4}", z.modality.to_string(), z.include_null, z.k, z.accuracy);
    }
    if rep.succeeded() {
        Ok(0)
    } else {
        for (cell, err) in &rep.failures {
            eprintln!("failed: {cell}: {err}");
        }
        eprintln!("{} cell(s) failed; see {}", rep.failures.len(), m.output_dir.join(FAILURES_CSV).display());
        Ok(1)
    }
}

fn inspect(path: &Path) -> Result<u8> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(MAGIC) {
        print_corpus(&mujo::corpus::corpus_read_from(&bytes)?)?;
    } else if bytes.starts_with(CHECKPOINT_MAGIC) {
        let ck = Checkpoint::read_from(&bytes)?;
        let params: usize = ck.tensors.iter().map(|(_, t)| t.numel()).sum();
        out!("checkpoint: {} tensors, {params} values, seed {}", ck.tensors.len(), ck.seed);
        out!("{}", serde_json::to_string_pretty(&ck.config).map_err(|e| Error::Config(e.to_string()))?);
    } else {
        return Err(Error::Format {
            offset: 0,
            reason: format!("{} is neither a corpus nor a checkpoint", path.display()),
        });
    }
    Ok(0)
}

fn print_corpus(c: &Corpus) -> Result<()> {
    out!("windows: {}", c.windows.len());
    out!("classes: {} ({})", c.class_count(), c.label_names.join(", "));
    out!("sensors: {}", c.sensors);
    for s in [Split::Train, Split::Val, Split::Test] {
        out!("{s:?}: {}", c.split(s).count());
    }
    let mods: Vec<String> = c.common_modalities().iter().map(Modality::to_string).collect();
    out!("modalities: {}", mods.join(","));
    Ok(())
}

fn dataset_name(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "corpus".into())
}
