//! Single-modality proxy-task pre-training on sensor windows: view contrast,
//! transformation discrimination and reconstruction.

mod augment;
mod heads;

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Modality, MultimodalWindow, Split};
use crate::error::{Error, Result};
use crate::models::{input_batch, ArchSpec, Checkpoint, ModalityModel};
use crate::pretrain::EpochMetrics;
use crate::tensor::optim::{train_step, AdamW, AdamWConfig, LrSchedule};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub use augment::{
    augment, hflip, negate, permute_segments, rotate, rotation_matrix, shuffle_axes, AugmentKind, AugmentationSpec,
};
pub use heads::{ntxent_loss, Decoder, SimclrHead, TaskHead, DECODER_CHANNELS, SIMCLR_DIMS, TASK_HIDDEN};

/// Transformations the multi-task baseline learns to detect, in head order.
pub const MULTITASK_TASKS: [AugmentKind; 6] = [
    AugmentKind::Noise,
    AugmentKind::Scale,
    AugmentKind::Negate,
    AugmentKind::Hflip,
    AugmentKind::Permute4,
    AugmentKind::ChannelShuffle,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMethod {
    Simclr,
    Multitask,
    Autoencoder,
}

impl BaselineMethod {
    pub const ALL: [BaselineMethod; 3] = [BaselineMethod::Simclr, BaselineMethod::Multitask, BaselineMethod::Autoencoder];

    pub fn name(self) -> &'static str {
        match self {
            BaselineMethod::Simclr => "simclr",
            BaselineMethod::Multitask => "multitask",
            BaselineMethod::Autoencoder => "autoencoder",
        }
    }
}

impl FromStr for BaselineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineMethod::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::Input(format!("unknown pre-training method '{s}'")))
    }
}

impl std::fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// NT-Xent temperature.
    pub tau: f64,
    /// Probability that a multi-task input is transformed.
    pub transform_prob: f64,
    pub optimizer: AdamWConfig,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            method: BaselineMethod::Simclr,
            batch_size: 256,
            max_epochs: 200,
            patience: 50,
            tau: 0.1,
            transform_prob: 0.5,
            optimizer: AdamWConfig::default(),
            schedule: LrSchedule::default(),
            seed: 0,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.transform_prob) {
            return Err(Error::Config(format!("transform probability {} outside [0, 1]", self.transform_prob)));
        }
        self.schedule.validate()
    }
}

#[derive(Clone, Debug)]
enum ProxyHead {
    Simclr(SimclrHead),
    Multitask(Vec<TaskHead>),
    Autoencoder(Decoder),
}

/// Sensor tower plus the method's proxy head, sharing one store.
#[derive(Clone, Debug)]
pub struct ProxyModel {
    pub method: BaselineMethod,
    pub store: ParamStore<f32>,
    pub backbone: ModalityModel,
    pub sensors: usize,
    head: ProxyHead,
}

impl ProxyModel {
    /// The sensor tower is drawn from `rng` before the head.
    pub fn new<R: Rng>(method: BaselineMethod, sensors: usize, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let backbone = ModalityModel::new(&mut store, Modality::Sensor, sensors, rng)?;
        let head = match method {
            BaselineMethod::Simclr => ProxyHead::Simclr(SimclrHead::new(&mut store, "simclr.head", rng)),
            BaselineMethod::Multitask => ProxyHead::Multitask(
                MULTITASK_TASKS
                    .iter()
                    .map(|k| TaskHead::new(&mut store, &format!("multitask.{k}"), rng))
                    .collect(),
            ),
            BaselineMethod::Autoencoder => ProxyHead::Autoencoder(Decoder::new(&mut store, "autoencoder.decoder", sensors, rng)?),
        };
        Ok(Self {
            method,
            store,
            backbone,
            sensors,
            head,
        })
    }

    /// Detection logits `[B]` of one multi-task head.
    pub fn task_logits(&self, task: usize, payloads: &[Vec<f32>]) -> Result<Vec<f32>> {
        let ProxyHead::Multitask(heads) = &self.head else {
            return Err(Error::Config(format!("{} model has no task heads", self.method)));
        };
        let head = heads
            .get(task)
            .ok_or_else(|| Error::Input(format!("task {task} out of range")))?;
        let mut g = Graph::new(&self.store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = g.input(stack(payloads, self.sensors)?);
        let rep = self.backbone.rep_forward(&mut g, x, &mut rng)?;
        let z = head.forward(&mut g, rep)?;
        Ok(g.value(z).data().to_vec())
    }
}

fn stack(payloads: &[Vec<f32>], sensors: usize) -> Result<Tensor<f32>> {
    let mut shape = vec![payloads.len()];
    shape.extend(Modality::Sensor.input_shape(sensors));
    Tensor::new(&shape, payloads.concat())
}

/// Method objective on one batch plus named sub-terms (the per-task losses for multi-task).
fn objective(
    g: &mut Graph<f32>,
    model: &ProxyModel,
    windows: &[&MultimodalWindow],
    cfg: &BaselineConfig,
    aug_rng: &mut ChaCha8Rng,
    drop_rng: &mut ChaCha8Rng,
) -> Result<(Var, Vec<(String, Var)>)> {
    let s = model.sensors;
    match &model.head {
        ProxyHead::Simclr(head) => {
            let spec = AugmentationSpec::new(AugmentKind::Rotate3d);
            let mut views = [Vec::new(), Vec::new()];
            for w in windows {
                let p = sensor_payload(w)?;
                for v in &mut views {
                    v.push(augment(p, s, &spec, aug_rng)?);
                }
            }
            let mut z = Vec::with_capacity(2);
            for v in &views {
                let x = g.input(stack(v, s)?);
                let rep = model.backbone.rep_forward(g, x, drop_rng)?;
                z.push(head.forward(g, rep)?);
            }
            Ok((ntxent_loss(g, z[0], z[1], cfg.tau)?, Vec::new()))
        }
        ProxyHead::Multitask(heads) => {
            let mut terms = Vec::with_capacity(heads.len());
            let mut total: Option<Var> = None;
            for (kind, head) in MULTITASK_TASKS.iter().zip(heads) {
                let spec = AugmentationSpec::new(*kind);
                let mut inputs = Vec::with_capacity(windows.len());
                let mut targets = Vec::with_capacity(windows.len());
                for w in windows {
                    let p = sensor_payload(w)?;
                    if aug_rng.random_bool(cfg.transform_prob) {
                        inputs.push(augment(p, s, &spec, aug_rng)?);
                        targets.push(1.0f32);
                    } else {
                        inputs.push(p.to_vec());
                        targets.push(0.0);
                    }
                }
                let x = g.input(stack(&inputs, s)?);
                let rep = model.backbone.rep_forward(g, x, drop_rng)?;
                let logits = head.forward(g, rep)?;
                let l = g.bce_with_logits(logits, &targets)?;
                terms.push((kind.name().to_string(), l));
                total = Some(match total {
                    None => l,
                    Some(t) => g.add(t, l)?,
                });
            }
            Ok((total.expect("six tasks"), terms))
        }
        ProxyHead::Autoencoder(decoder) => {
            let target = input_batch::<f32>(windows, Modality::Sensor, s)?;
            let x = g.input(target.clone());
            let rep = model.backbone.rep_forward(g, x, drop_rng)?;
            let y = decoder.forward(g, rep, drop_rng)?;
            Ok((g.mse(y, &target)?, Vec::new()))
        }
    }
}

fn sensor_payload(w: &MultimodalWindow) -> Result<&[f32]> {
    w.sensor
        .as_deref()
        .ok_or_else(|| Error::Data(format!("window of clip {} lacks sensor", w.clip)))
}

/// Per-window mean objective over `windows`, with augmentations drawn from a fixed seed.
pub fn evaluate_objective(model: &ProxyModel, windows: &[&MultimodalWindow], cfg: &BaselineConfig) -> Result<(f64, Vec<(String, f64)>)> {
    if windows.len() < 2 {
        return Err(Error::Data(format!("validation needs at least 2 windows, got {}", windows.len())));
    }
    let batch = cfg.batch_size;
    let mut bounds: Vec<(usize, usize)> = (0..windows.len()).step_by(batch).map(|a| (a, (a + batch).min(windows.len()))).collect();
    if bounds.len() > 1 && bounds[bounds.len() - 1].1 - bounds[bounds.len() - 1].0 < 2 {
        let last = bounds.pop().expect("len > 1");
        bounds.last_mut().expect("len > 0").1 = last.1;
    }
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(5);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    let mut terms: Vec<(String, f64)> = Vec::new();
    for (a, b) in bounds {
        let mut g = Graph::new(&model.store, false);
        let (loss, parts) = objective(&mut g, model, &windows[a..b], cfg, &mut aug_rng, &mut drop_rng)?;
        let n = (b - a) as f64;
        total += g.value(loss).item() as f64 * n;
        for (i, (name, v)) in parts.iter().enumerate() {
            if terms.len() <= i {
                terms.push((name.clone(), 0.0));
            }
            terms[i].1 += g.value(*v).item() as f64 * n;
        }
    }
    let n = windows.len() as f64;
    for t in &mut terms {
        t.1 /= n;
    }
    Ok((total / n, terms))
}

/// Trained proxy model at its best validation epoch.
#[derive(Clone, Debug)]
pub struct BaselineOutcome {
    pub model: ProxyModel,
    pub config: BaselineConfig,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochMetrics>,
}

impl BaselineOutcome {
    /// Full store snapshot; the `arch` echo lets the sensor tower load downstream.
    pub fn checkpoint(&self) -> Checkpoint {
        let config = serde_json::json!({
            "method": self.config.method,
            "arch": ArchSpec { modalities: vec![Modality::Sensor], sensors: self.model.sensors },
            "pretrain": self.config,
            "best_val_loss": self.best_val_loss,
            "best_epoch": self.best_epoch,
        });
        Checkpoint::from_store(&self.model.store, &[""], config, self.config.seed)
    }
}

pub fn simclr_pretrain(corpus: &Corpus, cfg: &BaselineConfig) -> Result<BaselineOutcome> {
    baseline_pretrain(corpus, &BaselineConfig { method: BaselineMethod::Simclr, ..cfg.clone() })
}

pub fn multitask_pretrain(corpus: &Corpus, cfg: &BaselineConfig) -> Result<BaselineOutcome> {
    baseline_pretrain(corpus, &BaselineConfig { method: BaselineMethod::Multitask, ..cfg.clone() })
}

pub fn autoencoder_pretrain(corpus: &Corpus, cfg: &BaselineConfig) -> Result<BaselineOutcome> {
    baseline_pretrain(corpus, &BaselineConfig { method: BaselineMethod::Autoencoder, ..cfg.clone() })
}

/// Trains `cfg.method` on sensor windows of the train split with early stopping on its validation objective.
pub fn baseline_pretrain(corpus: &Corpus, cfg: &BaselineConfig) -> Result<BaselineOutcome> {
    cfg.validate()?;
    let train: Vec<&MultimodalWindow> = corpus.split(Split::Train).collect();
    let val: Vec<&MultimodalWindow> = corpus.split(Split::Val).collect();
    for (what, set) in [("train", &train), ("validation", &val)] {
        if let Some(w) = set.iter().find(|w| !w.has(Modality::Sensor)) {
            return Err(Error::Data(format!("{what} window of clip {} lacks sensor", w.clip)));
        }
    }
    if train.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "train split has {} windows, fewer than one batch of {}",
            train.len(),
            cfg.batch_size
        )));
    }

    let stream = |s: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(s);
        r
    };
    let mut model = ProxyModel::new(cfg.method, corpus.sensors, &mut stream(0))?;
    let mut shuffle_rng = stream(1);
    let mut drop_rng = stream(2);
    let mut aug_rng = stream(3);
    let mut opt = AdamW::new(cfg.optimizer);

    let (initial_val_loss, _) = evaluate_objective(&model, &val, cfg)?;
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
            let view = model.clone_structure();
            let step = train_step(&mut model.store, &mut opt, lr, |g| {
                Ok(objective(g, &view, &batch, cfg, &mut aug_rng, &mut drop_rng)?.0)
            });
            train_sum += step.map_err(|e| e.at(epoch, b))? * batch.len() as f64;
            train_items += batch.len();
        }
        let (val_loss, terms) = evaluate_objective(&model, &val, cfg)?;
        if !val_loss.is_finite() {
            return Err(Error::Training {
                epoch,
                batch: 0,
                lr,
                reason: format!("non-finite validation objective {val_loss}"),
            });
        }
        log::info!("{} epoch {epoch} lr {lr:.3e} train {:.5} val {val_loss:.5}", cfg.method, train_sum / train_items as f64);
        history.push(EpochMetrics {
            epoch,
            lr,
            train_loss: train_sum / train_items as f64,
            val_loss,
            pair_losses: terms,
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
    Ok(BaselineOutcome {
        model,
        config: cfg.clone(),
        initial_val_loss,
        best_val_loss,
        best_epoch,
        history,
    })
}

impl ProxyModel {
    /// Layer layout without parameter values.
    fn clone_structure(&self) -> ProxyModel {
        ProxyModel {
            method: self.method,
            store: ParamStore::new(),
            backbone: self.backbone.clone(),
            sensors: self.sensors,
            head: self.head.clone(),
        }
    }
}

/// Held-out detection accuracy of each multi-task head on balanced transformed/original inputs.
pub fn multitask_accuracy(model: &ProxyModel, windows: &[&MultimodalWindow], seed: u64) -> Result<Vec<(AugmentKind, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(MULTITASK_TASKS.len());
    for (t, kind) in MULTITASK_TASKS.iter().enumerate() {
        let spec = AugmentationSpec::new(*kind);
        let mut inputs = Vec::with_capacity(2 * windows.len());
        for w in windows {
            let p = sensor_payload(w)?;
            inputs.push(p.to_vec());
            inputs.push(augment(p, model.sensors, &spec, &mut rng)?);
        }
        let mut correct = 0;
        for (ci, chunk) in inputs.chunks(128).enumerate() {
            let logits = model.task_logits(t, chunk)?;
            for (j, z) in logits.iter().enumerate() {
                let transformed = (ci * 128 + j) % 2 == 1;
                if (*z > 0.0) == transformed {
                    correct += 1;
                }
            }
        }
        out.push((*kind, correct as f64 / inputs.len() as f64));
    }
    Ok(out)
}
