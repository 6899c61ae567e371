//! Downstream classification on top of pre-trained (or random) towers.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Modality, MultimodalWindow, Split};
use crate::error::{Error, Result};
use crate::harness::{confusion_matrix, macro_f1, mean_std, per_class_f1};
use crate::models::{input_batch, Checkpoint, ClassifierHead, ModalityModel, REP_DIM};
use crate::tensor::optim::{train_step, AdamW, AdamWConfig};
use crate::tensor::{Float, Graph, ParamStore, Reduction, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Random initialization, everything trained.
    Baseline,
    /// Pre-trained towers held fixed; only the head trains.
    PretrainedFrozen,
    /// Pre-trained towers trained together with the head.
    PretrainedTrainable,
    /// Random towers held fixed; a control for the frozen scenario.
    RandomFrozen,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::Baseline,
        Scenario::PretrainedFrozen,
        Scenario::PretrainedTrainable,
        Scenario::RandomFrozen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Baseline => "baseline",
            Scenario::PretrainedFrozen => "pretrained_frozen",
            Scenario::PretrainedTrainable => "pretrained_trainable",
            Scenario::RandomFrozen => "random_frozen",
        }
    }

    pub fn uses_checkpoint(self) -> bool {
        matches!(self, Scenario::PretrainedFrozen | Scenario::PretrainedTrainable)
    }

    pub fn frozen(self) -> bool {
        matches!(self, Scenario::PretrainedFrozen | Scenario::RandomFrozen)
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s.trim())
            .ok_or_else(|| Error::Input(format!("unknown scenario '{s}'")))
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which towers feed the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    Sensor,
    Pose,
    Video,
    /// Concatenated sensor, pose and video representations.
    Multimodal,
}

impl InputKind {
    pub fn modalities(self) -> Vec<Modality> {
        match self {
            InputKind::Sensor => vec![Modality::Sensor],
            InputKind::Pose => vec![Modality::Pose],
            InputKind::Video => vec![Modality::Video],
            InputKind::Multimodal => vec![Modality::Sensor, Modality::Pose, Modality::Video],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InputKind::Sensor => "sensor",
            InputKind::Pose => "pose",
            InputKind::Video => "video",
            InputKind::Multimodal => "multimodal",
        }
    }
}

impl FromStr for InputKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sensor" => Ok(InputKind::Sensor),
            "pose" => Ok(InputKind::Pose),
            "video" => Ok(InputKind::Video),
            "multimodal" => Ok(InputKind::Multimodal),
            other => Err(Error::Input(format!("unknown input '{other}'"))),
        }
    }
}

impl std::fmt::Display for InputKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub scenario: Scenario,
    pub input: InputKind,
    pub fraction: f64,
    pub include_null: bool,
    pub max_epochs: usize,
    pub patience: usize,
    pub repetitions: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Baseline,
            input: InputKind::Sensor,
            fraction: 1.0,
            include_null: true,
            max_epochs: 200,
            patience: 25,
            repetitions: 20,
            batch_size: 64,
            lr: 1e-3,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!("fraction {} outside (0, 1]", self.fraction)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch size and epoch budget must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// `w_c = max(counts) / counts_c`.
pub fn class_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Config(format!("class {c} has no training instances")));
    }
    let max = counts.iter().copied().max().unwrap_or(0) as f64;
    Ok(counts.iter().map(|&n| max / n as f64).collect())
}

/// Batch-mean of `w_y · (-log softmax(logits)_y)`.
pub fn weighted_ce<T: Float>(g: &mut Graph<T>, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
    let w: Vec<T> = weights.iter().map(|&v| T::lit(v)).collect();
    g.cross_entropy(logits, labels, Some(&w), Reduction::Mean, false)
}

/// Per class keeps `max(1, floor(fraction·count))` indices drawn without replacement.
///
/// Returns sorted indices into `labels`.
pub fn sample_fraction(labels: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} outside (0, 1]")));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        let n = ((fraction * members.len() as f64).floor() as usize).max(1);
        members.shuffle(&mut rng);
        keep.extend_from_slice(&members[..n]);
    }
    keep.sort_unstable();
    Ok(keep)
}

/// Outcome of one fine-tuning run, evaluated on the test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub scenario: Scenario,
    pub input: InputKind,
    pub fraction: f64,
    pub include_null: bool,
    pub seed: u64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub confusion: Vec<Vec<usize>>,
    pub class_names: Vec<String>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub train_size: usize,
}

/// Scores of `repetitions` runs with seeds `seed + i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub runs: Vec<RunResult>,
    pub mean: f64,
    pub std: f64,
}

impl ExperimentResult {
    pub fn scores(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.macro_f1).collect()
    }
}

/// Labeled windows of one split, relabeled to compact class ids.
struct LabeledSet<'a> {
    windows: Vec<&'a MultimodalWindow>,
    labels: Vec<usize>,
}

/// Concatenated tower representations for a batch of windows.
fn tower_features(
    g: &mut Graph<f32>,
    towers: &[ModalityModel],
    sensors: usize,
    windows: &[&MultimodalWindow],
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let mut reps = Vec::with_capacity(towers.len());
    for t in towers {
        let x = g.input(input_batch::<f32>(windows, t.modality, sensors)?);
        reps.push(t.rep_forward(g, x, rng)?);
    }
    if reps.len() == 1 {
        Ok(reps[0])
    } else {
        g.concat_cols(&reps)
    }
}

fn gather_rows(t: &Tensor<f32>, idx: impl Iterator<Item = usize>) -> Result<Tensor<f32>> {
    let rows: Vec<&[f32]> = idx.map(|i| t.row(i)).collect();
    Tensor::from_rows(&rows, &t.shape()[1..])
}

const EVAL_CHUNK: usize = 128;

struct Classifier {
    store: ParamStore<f32>,
    towers: Vec<ModalityModel>,
    head: ClassifierHead,
    sensors: usize,
}

impl Classifier {
    /// Inference-mode tower features, one row per window.
    fn cached_features(&self, windows: &[&MultimodalWindow]) -> Result<Tensor<f32>> {
        let dim = REP_DIM * self.towers.len();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut data = Vec::with_capacity(windows.len() * dim);
        for chunk in windows.chunks(EVAL_CHUNK) {
            let mut g = Graph::new(&self.store, false);
            let f = tower_features(&mut g, &self.towers, self.sensors, chunk, &mut rng)?;
            data.extend_from_slice(g.value(f).data());
        }
        Tensor::new(&[windows.len(), dim], data)
    }

    fn predict(&self, windows: &[&MultimodalWindow], cached: Option<&Tensor<f32>>) -> Result<Vec<usize>> {
        let mut preds = Vec::with_capacity(windows.len());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (ci, chunk) in windows.chunks(EVAL_CHUNK).enumerate() {
            let mut g = Graph::new(&self.store, false);
            let f = match cached {
                Some(c) => {
                    let start = ci * EVAL_CHUNK;
                    g.input(gather_rows(c, start..start + chunk.len())?)
                }
                None => tower_features(&mut g, &self.towers, self.sensors, chunk, &mut rng)?,
            };
            let logits = self.head.forward(&mut g, f)?;
            let lv = g.value(logits);
            for i in 0..chunk.len() {
                let row = lv.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                preds.push(best);
            }
        }
        Ok(preds)
    }
}

fn run_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Compact class ids: NULL dropped unless `include_null`.
fn class_table(corpus: &Corpus, include_null: bool) -> (Vec<Option<usize>>, Vec<String>) {
    let null = corpus.null_label();
    let mut map = vec![None; corpus.class_count()];
    let mut names = Vec::new();
    for (c, name) in corpus.label_names.iter().enumerate() {
        if !include_null && null == Some(c as u32) {
            continue;
        }
        map[c] = Some(names.len());
        names.push(name.clone());
    }
    (map, names)
}

fn labeled<'a>(corpus: &'a Corpus, split: Split, map: &[Option<usize>], modalities: &[Modality]) -> Result<LabeledSet<'a>> {
    let mut set = LabeledSet {
        windows: Vec::new(),
        labels: Vec::new(),
    };
    for w in corpus.split(split) {
        let Some(l) = w.label.and_then(|l| map[l as usize]) else {
            continue;
        };
        if let Some(m) = modalities.iter().find(|m| !w.has(**m)) {
            return Err(Error::Config(format!("{split:?} window of clip {} lacks {m} required by the input", w.clip)));
        }
        set.windows.push(w);
        set.labels.push(l);
    }
    Ok(set)
}

/// Towers drawn from stream 1 (then overwritten from the checkpoint when
/// pre-trained) and a head drawn from stream 2 of `run_seed`.
fn build_classifier(corpus: &Corpus, checkpoint: Option<&Checkpoint>, cfg: &FinetuneConfig, run_seed: u64, k: usize) -> Result<Classifier> {
    let mut store = ParamStore::<f32>::new();
    let modalities = cfg.input.modalities();
    let mut backbone_rng = run_rng(run_seed, 1);
    let mut towers = Vec::with_capacity(modalities.len());
    for &m in &modalities {
        towers.push(ModalityModel::new(&mut store, m, corpus.sensors, &mut backbone_rng)?);
    }
    let head = ClassifierHead::new(&mut store, "head", REP_DIM * towers.len(), k, &mut run_rng(run_seed, 2))?;
    if cfg.scenario.uses_checkpoint() {
        let ck = checkpoint.ok_or_else(|| Error::Config(format!("scenario {} needs a checkpoint", cfg.scenario)))?;
        for t in &towers {
            let prefix = t.prefix();
            if !ck.names().any(|n| n.starts_with(&prefix)) {
                return Err(Error::Config(format!("checkpoint has no {} model", t.modality)));
            }
            ck.load_into(&mut store, &prefix).map_err(|e| match e {
                Error::Dimension { .. } => Error::Config(format!("checkpoint {} model does not match the corpus: {e}", t.modality)),
                other => other,
            })?;
        }
    }
    if cfg.scenario.frozen() {
        for t in &towers {
            store.set_trainable(&t.prefix(), false);
        }
    }
    Ok(Classifier {
        store,
        towers,
        head,
        sensors: corpus.sensors,
    })

}

/// Trains and evaluates one classifier.
pub fn finetune_run(corpus: &Corpus, checkpoint: Option<&Checkpoint>, cfg: &FinetuneConfig, run_seed: u64) -> Result<RunResult> {
    fit(corpus, checkpoint, cfg, run_seed).map(|(r, _)| r)
}

fn fit(corpus: &Corpus, checkpoint: Option<&Checkpoint>, cfg: &FinetuneConfig, run_seed: u64) -> Result<(RunResult, Classifier)> {
    cfg.validate()?;
    let modalities = cfg.input.modalities();
    let (map, class_names) = class_table(corpus, cfg.include_null);
    let k = class_names.len();
    let train_all = labeled(corpus, Split::Train, &map, &modalities)?;
    let val = labeled(corpus, Split::Val, &map, &modalities)?;
    let test = labeled(corpus, Split::Test, &map, &modalities)?;
    if val.windows.is_empty() || test.windows.is_empty() {
        return Err(Error::Data("fine-tuning needs labeled validation and test windows".into()));
    }

    let picked = sample_fraction(&train_all.labels, cfg.fraction, rand::RngCore::next_u64(&mut run_rng(run_seed, 0)))?;
    let train = LabeledSet {
        windows: picked.iter().map(|&i| train_all.windows[i]).collect(),
        labels: picked.iter().map(|&i| train_all.labels[i]).collect(),
    };
    let mut counts = vec![0usize; k];
    for &l in &train.labels {
        counts[l] += 1;
    }
    let weights = class_weights(&counts)?;

    let mut model = build_classifier(corpus, checkpoint, cfg, run_seed, k)?;

    // Frozen towers are evaluated once in inference mode.
    let cache = if cfg.scenario.frozen() {
        Some((
            model.cached_features(&train.windows)?,
            model.cached_features(&val.windows)?,
            model.cached_features(&test.windows)?,
        ))
    } else {
        None
    };

    let mut opt = AdamW::new(cfg.optimizer);
    let mut shuffle_rng = run_rng(run_seed, 3);
    let mut dropout_rng = run_rng(run_seed, 4);
    let mut order: Vec<usize> = (0..train.windows.len()).collect();
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut best_store: Option<ParamStore<f32>> = None;
    let mut since_best = 0;
    let mut epochs_run = 0;

    for epoch in 0..cfg.max_epochs {
        epochs_run = epoch + 1;
        order.shuffle(&mut shuffle_rng);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let Classifier { store, towers, head, sensors } = &mut model;
            let step = match &cache {
                Some((tr, _, _)) => {
                    let rows = gather_rows(tr, idx.iter().copied())?;
                    train_step(store, &mut opt, cfg.lr, |g| {
                        let f = g.input(rows);
                        let logits = head.forward(g, f)?;
                        weighted_ce(g, logits, &labels, &weights)
                    })
                }
                None => {
                    let batch: Vec<&MultimodalWindow> = idx.iter().map(|&i| train.windows[i]).collect();
                    train_step(store, &mut opt, cfg.lr, |g| {
                        let f = tower_features(g, towers, *sensors, &batch, &mut dropout_rng)?;
                        let logits = head.forward(g, f)?;
                        weighted_ce(g, logits, &labels, &weights)
                    })
                }
            };
            step.map_err(|e| e.at(epoch, b))?;
        }
        let preds = model.predict(&val.windows, cache.as_ref().map(|c| &c.1))?;
        let f1 = macro_f1(&preds, &val.labels, k)?;
        if f1 > best_f1 {
            best_f1 = f1;
            best_epoch = epoch;
            let mut snap = model.store.clone();
            snap.zero_grad();
            best_store = Some(snap);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    if let Some(best) = best_store {
        model.store = best;
    }
    let preds = model.predict(&test.windows, cache.as_ref().map(|c| &c.2))?;
    let confusion = confusion_matrix(&preds, &test.labels, k)?;
    let result = RunResult {
        scenario: cfg.scenario,
        input: cfg.input,
        fraction: cfg.fraction,
        include_null: cfg.include_null,
        seed: run_seed,
        macro_f1: macro_f1(&preds, &test.labels, k)?,
        per_class_f1: per_class_f1(&confusion),
        confusion,
        class_names,
        best_epoch,
        epochs_run,
        train_size: train.windows.len(),
    };
    Ok((result, model))
}

/// Runs `cfg.repetitions` seeds `cfg.seed + i` and aggregates their Macro F1.
pub fn experiment(corpus: &Corpus, checkpoint: Option<&Checkpoint>, cfg: &FinetuneConfig) -> Result<ExperimentResult> {
    let mut runs = Vec::with_capacity(cfg.repetitions);
    for i in 0..cfg.repetitions as u64 {
        runs.push(finetune_run(corpus, checkpoint, cfg, cfg.seed + i)?);
    }
    let scores: Vec<f64> = runs.iter().map(|r| r.macro_f1).collect();
    let (mean, std) = mean_std(&scores);
    Ok(ExperimentResult { runs, mean, std })
}

/// Column names of the per-run CSV.
pub const RUN_CSV_HEADER: [&str; 7] = ["dataset", "input", "scenario", "fraction", "include_null", "run_seed", "macro_f1"];

/// Writes one row per run.
pub fn write_runs_csv<W: std::io::Write>(dataset: &str, runs: &[RunResult], w: W) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut out = csv::Writer::from_writer(w);
    out.write_record(RUN_CSV_HEADER).map_err(csv_err)?;
    for r in runs {
        out.write_record([
            dataset.to_string(),
            r.input.to_string(),
            r.scenario.to_string(),
            r.fraction.to_string(),
            r.include_null.to_string(),
            r.seed.to_string(),
            r.macro_f1.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn weights_reference_cases() {
        assert_eq!(class_weights(&[100, 50, 25]).unwrap(), vec![1.0, 2.0, 4.0]);
        assert_eq!(class_weights(&[5, 5]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(class_weights(&[7, 3]).unwrap(), vec![1.0, 7.0 / 3.0]);
        assert!(matches!(class_weights(&[3, 0]), Err(Error::Config(_))));
    }

    #[test]
    fn weighted_ce_reference_cases() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, false);
        let x = g.input(Tensor::new(&[1, 2], vec![0.3, 0.3]).unwrap());
        let l = weighted_ce(&mut g, x, &[1], &[1.0, 1.0]).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);
        let l2 = weighted_ce(&mut g, x, &[1], &[1.0, 2.0]).unwrap();
        assert!((g.value(l2).item() - 2.0 * 2f64.ln()).abs() < 1e-12);
        let sharp = g.input(Tensor::new(&[1, 2], vec![-40.0, 40.0]).unwrap());
        let l3 = weighted_ce(&mut g, sharp, &[1], &[1.0, 1.0]).unwrap();
        assert!(g.value(l3).item() < 1e-30);
    }

    #[test]
    fn fraction_reference_cases() {
        let labels: Vec<usize> = std::iter::repeat(0).take(100).chain(std::iter::repeat(1).take(50)).collect();
        let s = sample_fraction(&labels, 0.02, 3).unwrap();
        assert_eq!(s.iter().filter(|&&i| labels[i] == 0).count(), 2);
        assert_eq!(s.iter().filter(|&&i| labels[i] == 1).count(), 1);
        assert_eq!(sample_fraction(&labels, 1.0, 9).unwrap(), (0..150).collect::<Vec<_>>());
        assert_eq!(sample_fraction(&labels, 0.3, 5).unwrap(), sample_fraction(&labels, 0.3, 5).unwrap());
        assert!(sample_fraction(&labels, 0.0, 1).is_err());
    }

    #[test]
    fn parsing_round_trips() {
        for s in Scenario::ALL {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
        }
        assert!("frozen".parse::<Scenario>().is_err());
        assert_eq!("multimodal".parse::<InputKind>().unwrap(), InputKind::Multimodal);
    }

    fn small() -> Corpus {
        crate::corpus::synth_generate(&crate::corpus::SynthConfig {
            n_classes: 3,
            clips_per_class: 5,
            frames_per_clip: 300,
            ..Default::default()
        })
        .unwrap()
    }

    fn small_checkpoint(corpus: &Corpus) -> Checkpoint {
        let cfg = crate::pretrain::PretrainConfig {
            modalities: vec![Modality::Text, Modality::Sensor],
            batch_size: 8,
            max_epochs: 2,
            seed: 4,
            ..Default::default()
        };
        crate::pretrain::pretrain_loop(corpus, &cfg).unwrap().checkpoint()
    }

    fn quick(scenario: Scenario) -> FinetuneConfig {
        FinetuneConfig {
            scenario,
            max_epochs: 3,
            repetitions: 2,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn frozen_towers_keep_checkpoint_bytes() {
        let corpus = small();
        let ck = small_checkpoint(&corpus);
        let (res, model) = fit(&corpus, Some(&ck), &quick(Scenario::PretrainedFrozen), 0).unwrap();
        for (name, t) in model.store.named("sensor.") {
            assert_eq!(ck.get(name).unwrap().data(), t.data(), "{name}");
        }
        let (_, trained) = fit(&corpus, Some(&ck), &quick(Scenario::PretrainedTrainable), 0).unwrap();
        assert_ne!(trained.store.fingerprint("sensor."), model.store.fingerprint("sensor."));
        for (row, truth) in res.confusion.iter().zip(0..) {
            let support = corpus.split(Split::Test).filter(|w| w.label == Some(truth)).count();
            assert_eq!(row.iter().sum::<usize>(), support);
        }
    }

    #[test]
    fn head_initialization_is_shared_across_scenarios() {
        let corpus = small();
        let ck = small_checkpoint(&corpus);
        let heads: Vec<_> = [Scenario::Baseline, Scenario::PretrainedTrainable, Scenario::RandomFrozen]
            .into_iter()
            .map(|s| build_classifier(&corpus, Some(&ck), &quick(s), 5, 3).unwrap().store.fingerprint("head."))
            .collect();
        assert!(heads.windows(2).all(|w| w[0] == w[1]));
        let base = build_classifier(&corpus, None, &quick(Scenario::Baseline), 5, 3).unwrap();
        let pre = build_classifier(&corpus, Some(&ck), &quick(Scenario::PretrainedTrainable), 5, 3).unwrap();
        assert_ne!(base.store.fingerprint("sensor."), pre.store.fingerprint("sensor."));
    }

    #[test]
    fn checkpoint_mismatches_are_config_errors() {
        let corpus = small();
        let ck = small_checkpoint(&corpus);
        let pose = FinetuneConfig {
            input: InputKind::Pose,
            ..quick(Scenario::PretrainedFrozen)
        };
        assert!(matches!(finetune_run(&corpus, Some(&ck), &pose, 0), Err(Error::Config(_))));
        assert!(matches!(finetune_run(&corpus, None, &quick(Scenario::PretrainedTrainable), 0), Err(Error::Config(_))));
        let other = crate::corpus::synth_generate(&crate::corpus::SynthConfig {
            n_classes: 3,
            clips_per_class: 5,
            frames_per_clip: 300,
            sensor_joints: vec![16],
            ..Default::default()
        })
        .unwrap();
        assert!(matches!(finetune_run(&other, Some(&ck), &quick(Scenario::PretrainedFrozen), 0), Err(Error::Config(_))));
    }

    #[test]
    fn experiment_is_reproducible_and_aggregates_raw_scores() {
        let corpus = small();
        let cfg = FinetuneConfig {
            input: InputKind::Multimodal,
            fraction: 1.0,
            ..quick(Scenario::Baseline)
        };
        let a = experiment(&corpus, None, &cfg).unwrap();
        let b = experiment(&corpus, None, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.runs.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![11, 12]);
        assert!(a.runs.iter().all(|r| r.train_size == corpus.split(Split::Train).count()));
        let s = a.scores();
        let mean = (s[0] + s[1]) / 2.0;
        assert_eq!(a.mean, mean);
        assert!((a.std - ((s[0] - mean).powi(2) + (s[1] - mean).powi(2)).sqrt()).abs() < 1e-12);
        let mut buf = Vec::new();
        write_runs_csv("synth", &a.runs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("dataset,input,scenario,fraction,include_null,run_seed,macro_f1\nsynth,multimodal,baseline,1,true,11,"));
    }

    #[test]
    fn excluding_null_drops_the_class() {
        let mut corpus = small();
        corpus.label_names[2] = crate::corpus::NULL_LABEL.to_string();
        let cfg = FinetuneConfig {
            include_null: false,
            ..quick(Scenario::Baseline)
        };
        let r = finetune_run(&corpus, None, &cfg, 0).unwrap();
        assert_eq!(r.class_names.len(), 2);
        assert!(!r.class_names.iter().any(|n| n == crate::corpus::NULL_LABEL));
    }

    proptest! {
        #[test]
        fn weights_properties(counts in proptest::collection::vec(1usize..500, 1..12)) {
            let w = class_weights(&counts).unwrap();
            let max = *counts.iter().max().unwrap();
            for (c, &n) in counts.iter().enumerate() {
                prop_assert!(w[c] >= 1.0);
                prop_assert_eq!(w[c], max as f64 / n as f64);
                if n == max {
                    prop_assert_eq!(w[c], 1.0);
                }
            }
        }

        #[test]
        fn fraction_properties(counts in proptest::collection::vec(1usize..80, 1..8), fraction in 0.001f64..=1.0, seed in any::<u64>()) {
            let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat(c).take(n)).collect();
            let s = sample_fraction(&labels, fraction, seed).unwrap();
            for (c, &n) in counts.iter().enumerate() {
                let kept = s.iter().filter(|&&i| labels[i] == c).count();
                prop_assert_eq!(kept, ((fraction * n as f64).floor() as usize).max(1));
            }
            prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn equal_weights_match_plain_ce(logits in proptest::collection::vec(-5.0f64..5.0, 6), w in 0.1f64..4.0) {
            let store = ParamStore::<f64>::new();
            let mut g = Graph::new(&store, false);
            let x = g.input(Tensor::new(&[2, 3], logits).unwrap());
            let a = weighted_ce(&mut g, x, &[0, 2], &[1.0; 3]).unwrap();
            let b = g.cross_entropy(x, &[0, 2], None, Reduction::Mean, false).unwrap();
            let c = weighted_ce(&mut g, x, &[0, 2], &[w; 3]).unwrap();
            prop_assert!((g.value(a).item() - g.value(b).item()).abs() < 1e-12);
            prop_assert!((g.value(c).item() - w * g.value(b).item()).abs() < 1e-9);
        }
    }
}
