//! Per-modality encoders and projections into the shared 1280-d space, and
//! the two-layer classification head used downstream.

mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Modality, MultimodalWindow, JOINTS, TEXT_DIM, VIDEO_DIM, WINDOW_LEN};
use crate::error::{Error, Result};
use crate::tensor::layers::{Conv2d, LayerNorm, Linear};
use crate::tensor::{Float, Graph, Padding, ParamStore, Tensor, Var};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Width of the joint embedding space.
pub const REP_DIM: usize = 1280;
pub const CLASSIFIER_HIDDEN: usize = 256;

pub const TEXT_OUT: usize = 768;
pub const VIDEO_OUT: usize = 256;
pub const POSE_OUT: usize = 1024;
pub const SENSOR_OUT: usize = 512;

const TEXT_DROPOUT: f64 = 0.6;
const VIDEO_DROPOUT: f64 = 0.3;
const POSE_DROPOUT: f64 = 0.4;
const PROJECTION_DROPOUT: f64 = 0.4;

const POSE_CHANNELS: [usize; 3] = [8, 12, 48];
const SENSOR_CHANNELS: [usize; 3] = [3, 32, 96];
const KERNEL: usize = 11;

#[derive(Clone, Debug)]
enum EncoderLayers {
    Dense { layers: Vec<Linear>, dropout: f64 },
    Pose { convs: Vec<Conv2d>, fc: [Linear; 2] },
    Sensor { convs: Vec<Conv2d>, fc: Linear },
}

/// Modality-specific feature extractor.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub modality: Modality,
    pub sensors: usize,
    layers: EncoderLayers,
}

impl Encoder {
    /// Builds the encoder for `modality` under `{prefix}.encoder`.
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        modality: Modality,
        sensors: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let p = format!("{prefix}.encoder");
        let layers = match modality {
            Modality::Text => EncoderLayers::Dense {
                layers: vec![Linear::new(store, &format!("{p}.fc1"), TEXT_DIM, TEXT_OUT, rng)],
                dropout: TEXT_DROPOUT,
            },
            Modality::Video => EncoderLayers::Dense {
                layers: vec![
                    Linear::new(store, &format!("{p}.fc1"), VIDEO_DIM, VIDEO_OUT, rng),
                    Linear::new(store, &format!("{p}.fc2"), VIDEO_OUT, VIDEO_OUT, rng),
                ],
                dropout: VIDEO_DROPOUT,
            },
            Modality::Pose => {
                let mut convs = Vec::new();
                let mut c_in = 3;
                for (i, &c) in POSE_CHANNELS.iter().enumerate() {
                    convs.push(Conv2d::new(store, &format!("{p}.conv{}", i + 1), c_in, c, (KERNEL, KERNEL), Padding::Same, rng));
                    c_in = c;
                }
                let (mut h, mut w) = (JOINTS, WINDOW_LEN);
                for _ in 0..3 {
                    h /= 2;
                    w /= 2;
                }
                let flat = c_in * h * w;
                let fc = [
                    Linear::new(store, &format!("{p}.fc1"), flat, POSE_OUT, rng),
                    Linear::new(store, &format!("{p}.fc2"), POSE_OUT, POSE_OUT, rng),
                ];
                EncoderLayers::Pose { convs, fc }
            }
            Modality::Sensor => {
                if sensors == 0 {
                    return Err(Error::Parameter("sensor encoder needs at least one sensor".into()));
                }
                let [c1, c2, c3] = SENSOR_CHANNELS;
                let convs = vec![
                    Conv2d::new(store, &format!("{p}.conv1"), 3, c1, (sensors, KERNEL), Padding::Explicit(0, KERNEL / 2), rng),
                    Conv2d::new(store, &format!("{p}.conv2"), c1, c2, (1, KERNEL), Padding::Same, rng),
                    Conv2d::new(store, &format!("{p}.conv3"), c2, c3, (1, KERNEL), Padding::Same, rng),
                ];
                let flat = c3 * (WINDOW_LEN / 2 / 2 / 2);
                EncoderLayers::Sensor {
                    convs,
                    fc: Linear::new(store, &format!("{p}.fc1"), flat, SENSOR_OUT, rng),
                }
            }
        };
        Ok(Self { modality, sensors, layers })
    }

    pub fn output_dim(&self) -> usize {
        match self.modality {
            Modality::Text => TEXT_OUT,
            Modality::Video => VIDEO_OUT,
            Modality::Pose => POSE_OUT,
            Modality::Sensor => SENSOR_OUT,
        }
    }

    /// Per-item input shape.
    pub fn input_shape(&self) -> Vec<usize> {
        self.modality.input_shape(self.sensors)
    }

    pub fn forward<T: Float, R: Rng>(&self, g: &mut Graph<T>, x: Var, rng: &mut R) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let want = self.input_shape();
        if shape.len() != want.len() + 1 || shape[1..] != want[..] {
            let mut expected = vec![shape.first().copied().unwrap_or(0)];
            expected.extend(&want);
            return Err(Error::dim("encoder_input", &shape, &expected));
        }
        match &self.layers {
            EncoderLayers::Dense { layers, dropout } => {
                let mut h = x;
                for l in layers {
                    h = l.forward(g, h)?;
                    h = g.gelu(h);
                    h = g.dropout(h, *dropout, rng)?;
                }
                Ok(h)
            }
            EncoderLayers::Pose { convs, fc } => {
                let mut h = x;
                for c in convs {
                    h = c.forward(g, h)?;
                    h = g.gelu(h);
                    h = g.dropout(h, POSE_DROPOUT, rng)?;
                    h = g.max_pool2d(h, 2, 2)?;
                }
                h = g.flatten(h)?;
                for l in fc {
                    h = l.forward(g, h)?;
                    h = g.gelu(h);
                    h = g.dropout(h, POSE_DROPOUT, rng)?;
                }
                Ok(h)
            }
            EncoderLayers::Sensor { convs, fc } => {
                let mut h = x;
                for c in convs {
                    h = c.forward(g, h)?;
                    h = g.gelu(h);
                    h = g.max_pool2d(h, 1, 2)?;
                }
                h = g.flatten(h)?;
                h = fc.forward(g, h)?;
                Ok(g.gelu(h))
            }
        }
    }

    /// Multiply-accumulate count of one forward pass at batch size 1.
    pub fn forward_macs(&self) -> usize {
        match &self.layers {
            EncoderLayers::Dense { layers, .. } => layers.iter().map(|l| l.in_dim * l.out_dim).sum(),
            EncoderLayers::Pose { fc, .. } => {
                let (mut h, mut w, mut c_in, mut macs) = (JOINTS, WINDOW_LEN, 3, 0);
                for &c in &POSE_CHANNELS {
                    macs += c * c_in * KERNEL * KERNEL * h * w;
                    c_in = c;
                    h /= 2;
                    w /= 2;
                }
                macs + fc.iter().map(|l| l.in_dim * l.out_dim).sum::<usize>()
            }
            EncoderLayers::Sensor { fc, .. } => {
                let [c1, c2, c3] = SENSOR_CHANNELS;
                let t = WINDOW_LEN;
                c1 * 3 * self.sensors * KERNEL * t + c2 * c1 * KERNEL * (t / 2) + c3 * c2 * KERNEL * (t / 4) + fc.in_dim * fc.out_dim
            }
        }
    }
}

/// Three dense layers into the joint space, closed by a layer normalization.
#[derive(Clone, Debug)]
pub struct Projection {
    pub in_dim: usize,
    fc: [Linear; 3],
    norm: LayerNorm,
}

impl Projection {
    pub fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, prefix: &str, in_dim: usize, rng: &mut R) -> Result<Self> {
        if in_dim == 0 {
            return Err(Error::Parameter("projection input dimension must be positive".into()));
        }
        let p = format!("{prefix}.projection");
        let fc = [
            Linear::new(store, &format!("{p}.fc1"), in_dim, REP_DIM, rng),
            Linear::new(store, &format!("{p}.fc2"), REP_DIM, REP_DIM, rng),
            Linear::new(store, &format!("{p}.fc3"), REP_DIM, REP_DIM, rng),
        ];
        let norm = LayerNorm::new(store, &format!("{p}.norm"), REP_DIM);
        Ok(Self { in_dim, fc, norm })
    }

    pub fn forward<T: Float, R: Rng>(&self, g: &mut Graph<T>, x: Var, rng: &mut R) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.fc.iter().enumerate() {
            h = l.forward(g, h)?;
            if i + 1 < self.fc.len() {
                h = g.gelu(h);
                h = g.dropout(h, PROJECTION_DROPOUT, rng)?;
            }
        }
        self.norm.forward(g, h)
    }

    pub fn forward_macs(&self) -> usize {
        self.fc.iter().map(|l| l.in_dim * l.out_dim).sum()
    }
}

/// Encoder followed by projection: `rep(x) = projection(encoder(x))`.
#[derive(Clone, Debug)]
pub struct ModalityModel {
    pub modality: Modality,
    pub encoder: Encoder,
    pub projection: Projection,
}

impl ModalityModel {
    /// Parameters are named `{modality}.encoder.*` and `{modality}.projection.*`.
    pub fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, modality: Modality, sensors: usize, rng: &mut R) -> Result<Self> {
        let encoder = Encoder::new(store, modality.name(), modality, sensors, rng)?;
        let projection = Projection::new(store, modality.name(), encoder.output_dim(), rng)?;
        Ok(Self {
            modality,
            encoder,
            projection,
        })
    }

    pub fn prefix(&self) -> String {
        format!("{}.", self.modality.name())
    }

    pub fn encoder_prefix(&self) -> String {
        format!("{}.encoder.", self.modality.name())
    }

    pub fn projection_prefix(&self) -> String {
        format!("{}.projection.", self.modality.name())
    }

    pub fn rep_forward<T: Float, R: Rng>(&self, g: &mut Graph<T>, x: Var, rng: &mut R) -> Result<Var> {
        let h = self.encoder.forward(g, x, rng)?;
        self.projection.forward(g, h, rng)
    }

    /// Forward FLOPs at batch size 1, counting a multiply-accumulate as two.
    pub fn forward_flops(&self) -> (usize, usize) {
        (2 * self.encoder.forward_macs(), 2 * self.projection.forward_macs())
    }
}

/// Dense → GELU → dense classification head.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub in_dim: usize,
    pub classes: usize,
    fc1: Linear,
    fc2: Linear,
}

impl ClassifierHead {
    pub fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, prefix: &str, in_dim: usize, classes: usize, rng: &mut R) -> Result<Self> {
        if in_dim == 0 || classes == 0 {
            return Err(Error::Parameter(format!("classifier head needs in_dim and classes > 0, got {in_dim}, {classes}")));
        }
        Ok(Self {
            in_dim,
            classes,
            fc1: Linear::new(store, &format!("{prefix}.fc1"), in_dim, CLASSIFIER_HIDDEN, rng),
            fc2: Linear::new(store, &format!("{prefix}.fc2"), CLASSIFIER_HIDDEN, classes, rng),
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, features: Var) -> Result<Var> {
        let shape = g.shape(features).to_vec();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::dim("classifier_forward", &shape, &[shape.first().copied().unwrap_or(0), self.in_dim]));
        }
        let h = self.fc1.forward(g, features)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }
}

/// Joint-embedding network: one tower per modality sharing a parameter store.
#[derive(Clone, Debug)]
pub struct JointModel<T = f32> {
    pub store: ParamStore<T>,
    pub towers: Vec<ModalityModel>,
    pub sensors: usize,
}

/// Architecture echo recorded in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub modalities: Vec<Modality>,
    pub sensors: usize,
}

impl<T: Float> JointModel<T> {
    pub fn new<R: Rng>(modalities: &[Modality], sensors: usize, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut towers = Vec::new();
        let mut seen = Vec::new();
        for &m in modalities {
            if seen.contains(&m) {
                return Err(Error::Config(format!("modality {m} listed twice")));
            }
            seen.push(m);
            towers.push(ModalityModel::new(&mut store, m, sensors, rng)?);
        }
        Ok(Self { store, towers, sensors })
    }

    pub fn arch(&self) -> ArchSpec {
        ArchSpec {
            modalities: self.modalities(),
            sensors: self.sensors,
        }
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.towers.iter().map(|t| t.modality).collect()
    }

    pub fn tower(&self, m: Modality) -> Result<&ModalityModel> {
        self.towers
            .iter()
            .find(|t| t.modality == m)
            .ok_or_else(|| Error::Config(format!("model has no {m} tower")))
    }

    /// Inference-mode embeddings of `windows`, one row per window, in chunks of `batch`.
    pub fn embed(&self, windows: &[&MultimodalWindow], m: Modality, batch: usize) -> Result<Tensor<T>> {
        self.embed_chunks(m, windows.len(), batch, |range| input_batch::<T>(&windows[range], m, self.sensors))
    }

    /// Inference-mode embeddings of raw modality payloads, one row per payload.
    pub fn embed_payloads(&self, payloads: &[&[f32]], m: Modality, batch: usize) -> Result<Tensor<T>> {
        let item = m.payload_len(self.sensors);
        self.embed_chunks(m, payloads.len(), batch, |range| {
            let mut data = Vec::with_capacity(range.len() * item);
            let mut shape = vec![range.len()];
            shape.extend(m.input_shape(self.sensors));
            for p in &payloads[range] {
                if p.len() != item {
                    return Err(Error::dim("embed_payloads", &[p.len()], &[item]));
                }
                data.extend(p.iter().map(|&v| T::lit(v as f64)));
            }
            Tensor::new(&shape, data)
        })
    }

    fn embed_chunks<F>(&self, m: Modality, n: usize, batch: usize, mut input: F) -> Result<Tensor<T>>
    where
        F: FnMut(std::ops::Range<usize>) -> Result<Tensor<T>>,
    {
        let tower = self.tower(m)?;
        let mut rows: Vec<T> = Vec::with_capacity(n * REP_DIM);
        // Inference graphs never draw dropout masks.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let step = batch.max(1);
        for start in (0..n).step_by(step) {
            let x = input(start..(start + step).min(n))?;
            let mut g = Graph::new(&self.store, false);
            let xv = g.input(x);
            let y = tower.rep_forward(&mut g, xv, &mut rng)?;
            rows.extend_from_slice(g.value(y).data());
        }
        Tensor::new(&[n, REP_DIM], rows)
    }
}

/// Stacks one modality of `windows` into a `[B, ...input_shape]` tensor.
pub fn input_batch<T: Float>(windows: &[&MultimodalWindow], m: Modality, sensors: usize) -> Result<Tensor<T>> {
    let item = m.payload_len(sensors);
    let mut data = Vec::with_capacity(windows.len() * item);
    for w in windows {
        let p = w
            .payload(m)
            .ok_or_else(|| Error::Data(format!("window of clip {} lacks {m}", w.clip)))?;
        if p.len() != item {
            return Err(Error::dim("input_batch", &[p.len()], &[item]));
        }
        data.extend(p.iter().map(|&v| T::lit(v as f64)));
    }
    let mut shape = vec![windows.len()];
    shape.extend(m.input_shape(sensors));
    Tensor::new(&shape, data)
}
