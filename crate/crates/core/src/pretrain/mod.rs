//! Multimodal contrastive pre-training.

mod loss;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Modality, MultimodalWindow, Split};
use crate::error::{Error, Result};
use crate::models::{input_batch, Checkpoint, JointModel, ModalityModel};
use crate::tensor::optim::{train_step, AdamW, AdamWConfig, LrSchedule};
use crate::tensor::{Graph, ParamStore, Tensor};

pub use loss::{cosine_sim, info_nce, similarity_logits, total_loss, TotalLoss};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub modalities: Vec<Modality>,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub tau: f64,
    pub optimizer: AdamWConfig,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            modalities: Modality::ALL.to_vec(),
            batch_size: 256,
            max_epochs: 200,
            patience: 50,
            tau: 1.0,
            optimizer: AdamWConfig::default(),
            schedule: LrSchedule::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut mods = self.modalities.clone();
        mods.sort();
        mods.dedup();
        if mods.len() != self.modalities.len() {
            return Err(Error::Config("modality listed twice".into()));
        }
        if mods.len() < 2 {
            return Err(Error::Config(format!("pre-training needs at least 2 modalities, got {}", mods.len())));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        self.schedule.validate()
    }
}

/// One row of the per-epoch metrics log. Losses are per item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub pair_losses: Vec<(String, f64)>,
}

/// Best-validation parameters and the training history that produced them.
#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: JointModel<f32>,
    pub config: PretrainConfig,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochMetrics>,
}

impl PretrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        let config = serde_json::json!({
            "method": "mujo",
            "arch": self.model.arch(),
            "pretrain": self.config,
            "best_val_loss": self.best_val_loss,
            "best_epoch": self.best_epoch,
        });
        Checkpoint::from_store(&self.model.store, &[""], config, self.config.seed)
    }
}

impl JointModel<f32> {
    /// Rebuilds the towers recorded in a checkpoint's `arch` echo and loads their weights.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let arch: crate::models::ArchSpec = serde_json::from_value(ck.config["arch"].clone())
            .map_err(|e| Error::Config(format!("checkpoint lacks a valid architecture echo: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(ck.seed);
        let mut model = JointModel::new(&arch.modalities, arch.sensors, &mut rng)?;
        for t in &model.towers {
            ck.load_into(&mut model.store, &t.prefix())?;
        }
        Ok(model)
    }
}

fn check_windows(windows: &[&MultimodalWindow], modalities: &[Modality], what: &str) -> Result<()> {
    for m in modalities {
        if let Some(w) = windows.iter().find(|w| !w.has(*m)) {
            return Err(Error::Data(format!("{what} window of clip {} lacks {m}", w.clip)));
        }
    }
    Ok(())
}

fn pair_name(a: Modality, b: Modality) -> String {
    format!("{a}-{b}")
}

/// Summed total loss of one batch together with summed per-pair terms.
fn batch_loss(
    g: &mut Graph<f32>,
    towers: &[ModalityModel],
    sensors: usize,
    windows: &[&MultimodalWindow],
    tau: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TotalLoss> {
    let mut reps = Vec::with_capacity(towers.len());
    for t in towers {
        let x = g.input(input_batch::<f32>(windows, t.modality, sensors)?);
        reps.push((t.modality, t.rep_forward(g, x, rng)?));
    }
    total_loss(g, &reps, tau)
}

/// Per-item validation loss over all windows, chunked by `batch`.
///
/// A trailing chunk of one window is merged into its predecessor.
pub fn evaluate_loss(model: &JointModel<f32>, windows: &[&MultimodalWindow], batch: usize, tau: f64) -> Result<(f64, Vec<(String, f64)>)> {
    if windows.len() < 2 {
        return Err(Error::Data(format!("validation needs at least 2 windows, got {}", windows.len())));
    }
    let mut bounds: Vec<(usize, usize)> = (0..windows.len()).step_by(batch).map(|s| (s, (s + batch).min(windows.len()))).collect();
    if bounds.len() > 1 && bounds[bounds.len() - 1].1 - bounds[bounds.len() - 1].0 < 2 {
        let last = bounds.pop().expect("len > 1");
        bounds.last_mut().expect("len > 0").1 = last.1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    let mut pairs: Vec<(String, f64)> = Vec::new();
    for (a, b) in bounds {
        let mut g = Graph::new(&model.store, false);
        let t = batch_loss(&mut g, &model.towers, model.sensors, &windows[a..b], tau, &mut rng)?;
        total += g.value(t.loss).item() as f64;
        for (i, (ma, mb, v)) in t.pairs.iter().enumerate() {
            let val = g.value(*v).item() as f64;
            if pairs.len() <= i {
                pairs.push((pair_name(*ma, *mb), 0.0));
            }
            pairs[i].1 += val;
        }
    }
    let n = windows.len() as f64;
    for p in &mut pairs {
        p.1 /= n;
    }
    Ok((total / n, pairs))
}

/// Trains the configured towers on the corpus train split with early stopping on validation loss.
pub fn pretrain_loop(corpus: &Corpus, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let train: Vec<&MultimodalWindow> = corpus.split(Split::Train).collect();
    let val: Vec<&MultimodalWindow> = corpus.split(Split::Val).collect();
    check_windows(&train, &cfg.modalities, "train")?;
    check_windows(&val, &cfg.modalities, "validation")?;
    if train.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "train split has {} windows, fewer than one batch of {}",
            train.len(),
            cfg.batch_size
        )));
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = JointModel::<f32>::new(&cfg.modalities, corpus.sensors, &mut init_rng)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);
    let mut opt = AdamW::new(cfg.optimizer);

    let (initial_val_loss, _) = evaluate_loss(&model, &val, cfg.batch_size, cfg.tau)?;
    let mut best_val_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_store: Option<ParamStore<f32>> = None;
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.max_epochs {
        let lr = cfg.schedule.lr_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut train_sum = 0.0;
        let mut train_items = 0;
        for (b, idx) in order.chunks_exact(cfg.batch_size).enumerate() {
            let batch: Vec<&MultimodalWindow> = idx.iter().map(|&i| train[i]).collect();
            let towers = model.towers.clone();
            let sensors = model.sensors;
            let step = train_step(&mut model.store, &mut opt, lr, |g| {
                Ok(batch_loss(g, &towers, sensors, &batch, cfg.tau, &mut dropout_rng)?.loss)
            });
            let loss = step.map_err(|e| e.at(epoch, b))?;
            train_sum += loss;
            train_items += batch.len();
        }
        let (val_loss, pair_losses) = evaluate_loss(&model, &val, cfg.batch_size, cfg.tau)?;
        if !val_loss.is_finite() {
            return Err(Error::Training {
                epoch,
                batch: 0,
                lr,
                reason: format!("non-finite validation loss {val_loss}"),
            });
        }
        log::info!("pretrain epoch {epoch} lr {lr:.3e} train {:.5} val {val_loss:.5}", train_sum / train_items as f64);
        history.push(EpochMetrics {
            epoch,
            lr,
            train_loss: train_sum / train_items as f64,
            val_loss,
            pair_losses,
        });
        if val_loss < best_val_loss {
            best_val_loss = val_loss;
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
    Ok(PretrainOutcome {
        model,
        config: cfg.clone(),
        initial_val_loss,
        best_val_loss,
        best_epoch,
        history,
    })
}

/// Writes the metrics log with one column per modality pair.
pub fn write_metrics_csv(history: &[EpochMetrics], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let mut header = vec!["epoch".to_string(), "lr".into(), "train_loss".into(), "val_loss".into()];
    if let Some(first) = history.first() {
        header.extend(first.pair_losses.iter().map(|(n, _)| n.clone()));
    }
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(&header).map_err(csv_err)?;
    for h in history {
        let mut row = vec![h.epoch.to_string(), format!("{:e}", h.lr), h.train_loss.to_string(), h.val_loss.to_string()];
        row.extend(h.pair_losses.iter().map(|(_, v)| v.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Class-level cross-modal retrieval: fraction of `query` windows whose most
/// cosine-similar `target` rep (over the same window set) has the same label.
pub fn retrieval_top1(model: &JointModel<f32>, windows: &[&MultimodalWindow], query: Modality, target: Modality) -> Result<f64> {
    let labels: Vec<u32> = windows
        .iter()
        .map(|w| w.label.ok_or_else(|| Error::Data(format!("window of clip {} is unlabeled", w.clip))))
        .collect::<Result<_>>()?;
    if windows.is_empty() {
        return Err(Error::Data("retrieval over an empty window set".into()));
    }
    let q = model.embed(windows, query, 128)?;
    let t = model.embed(windows, target, 128)?;
    let sims = cosine_matrix(&q, &t);
    let n = windows.len();
    let hits = (0..n)
        .filter(|&i| {
            let row = &sims[i * n..(i + 1) * n];
            let best = argmax(row);
            labels[best] == labels[i]
        })
        .count();
    Ok(hits as f64 / n as f64)
}

/// Row-major `[A, B]` cosine similarities between the rows of two matrices.
pub fn cosine_matrix(a: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f64> {
    let norm = |t: &Tensor<f32>| -> Vec<Vec<f64>> {
        (0..t.shape()[0])
            .map(|i| {
                let r: Vec<f64> = t.row(i).iter().map(|&v| v as f64).collect();
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(|v| if n > 0.0 { v / n } else { 0.0 }).collect()
            })
            .collect()
    };
    let (na, nb) = (norm(a), norm(b));
    na.iter()
        .flat_map(|ra| nb.iter().map(move |rb| ra.iter().zip(rb).map(|(x, y)| x * y).sum::<f64>()))
        .collect()
}

/// Index of the first maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_generate, SynthConfig};

    fn tiny_corpus() -> Corpus {
        synth_generate(&SynthConfig {
            n_classes: 3,
            clips_per_class: 5,
            frames_per_clip: 250,
            sensor_joints: vec![13],
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn tiny_cfg() -> PretrainConfig {
        PretrainConfig {
            modalities: vec![Modality::Text, Modality::Sensor],
            batch_size: 8,
            max_epochs: 3,
            patience: 5,
            seed: 4,
            ..PretrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_cfg();
        cfg.modalities = vec![Modality::Text];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = tiny_cfg();
        cfg.tau = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn same_seed_gives_identical_weights() {
        let c = tiny_corpus();
        let a = pretrain_loop(&c, &tiny_cfg()).unwrap();
        let b = pretrain_loop(&c, &tiny_cfg()).unwrap();
        assert_eq!(a.model.store.fingerprint(""), b.model.store.fingerprint(""));
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 3);
    }

    #[test]
    fn zero_patience_stops_at_first_stall() {
        let cfg = PretrainConfig {
            patience: 0,
            max_epochs: 30,
            ..tiny_cfg()
        };
        let out = pretrain_loop(&tiny_corpus(), &cfg).unwrap();
        let mut best = f64::INFINITY;
        let mut expected = out.history.len();
        for h in &out.history {
            if h.val_loss >= best {
                expected = h.epoch + 1;
                break;
            }
            best = h.val_loss;
        }
        assert_eq!(out.history.len(), expected);
        assert!(expected < 30 || out.history.len() == 30);
    }

    #[test]
    fn checkpoint_reload_reproduces_embeddings() {
        let c = tiny_corpus();
        let out = pretrain_loop(&c, &tiny_cfg()).unwrap();
        let ck = out.checkpoint();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = JointModel::from_checkpoint(&Checkpoint::read_from(&buf).unwrap()).unwrap();
        let ws: Vec<_> = c.split(Split::Val).collect();
        let a = out.model.embed(&ws, Modality::Sensor, 16).unwrap();
        let b = back.embed(&ws, Modality::Sensor, 16).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn batch_larger_than_train_split_is_rejected() {
        let cfg = PretrainConfig {
            batch_size: 10_000,
            ..tiny_cfg()
        };
        assert!(matches!(pretrain_loop(&tiny_corpus(), &cfg), Err(Error::Config(_))));
    }
}
