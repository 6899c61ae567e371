//! Proxy-task heads placed on the sensor representation, and the NT-Xent loss.

use rand::Rng;

use crate::corpus::{AXES, WINDOW_LEN};
use crate::error::{Error, Result};
use crate::models::REP_DIM;
use crate::pretrain::similarity_logits;
use crate::tensor::layers::{BatchNorm2d, ConvTranspose2d, Linear};
use crate::tensor::{Float, Graph, Padding, ParamStore, Reduction, Var};

pub const SIMCLR_DIMS: [usize; 3] = [256, 128, 128];
pub const TASK_HIDDEN: usize = 256;
pub const DECODER_CHANNELS: [usize; 3] = [32, 16, 8];
pub const DECODER_DROPOUT: f64 = 0.05;
const DECODER_KERNEL: usize = 11;

/// NT-Xent over the `2B` l2-normalized views, averaged over all anchors.
pub fn ntxent_loss<T: Float>(g: &mut Graph<T>, z1: Var, z2: Var, tau: f64) -> Result<Var> {
    let (s1, s2) = (g.shape(z1).to_vec(), g.shape(z2).to_vec());
    if s1.len() != 2 || s1 != s2 {
        return Err(Error::dim("ntxent_loss", &s1, &s2));
    }
    let b = s1[0];
    if b < 2 {
        return Err(Error::Config(format!("NT-Xent needs at least 2 pairs, got {b}")));
    }
    let z = g.concat_rows(&[z1, z2])?;
    let logits = similarity_logits(g, z, z, tau)?;
    let targets: Vec<usize> = (0..2 * b).map(|i| (i + b) % (2 * b)).collect();
    g.cross_entropy(logits, &targets, None, Reduction::Mean, true)
}

/// Dense 256 → ReLU → dense 128 → ReLU → dense 128.
#[derive(Clone, Debug)]
pub struct SimclrHead {
    fc: [Linear; 3],
}

impl SimclrHead {
    pub fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, prefix: &str, rng: &mut R) -> Self {
        let [a, b, c] = SIMCLR_DIMS;
        Self {
            fc: [
                Linear::new(store, &format!("{prefix}.fc1"), REP_DIM, a, rng),
                Linear::new(store, &format!("{prefix}.fc2"), a, b, rng),
                Linear::new(store, &format!("{prefix}.fc3"), b, c, rng),
            ],
        }
    }

    pub fn output_dim(&self) -> usize {
        SIMCLR_DIMS[2]
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.fc.iter().enumerate() {
            h = l.forward(g, h)?;
            if i < 2 {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

/// Dense 256 → ReLU → dense 256 → sigmoid → dense 1: one transformation-detection logit.
#[derive(Clone, Debug)]
pub struct TaskHead {
    fc: [Linear; 3],
}

impl TaskHead {
    pub fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, prefix: &str, rng: &mut R) -> Self {
        Self {
            fc: [
                Linear::new(store, &format!("{prefix}.fc1"), REP_DIM, TASK_HIDDEN, rng),
                Linear::new(store, &format!("{prefix}.fc2"), TASK_HIDDEN, TASK_HIDDEN, rng),
                Linear::new(store, &format!("{prefix}.out"), TASK_HIDDEN, 1, rng),
            ],
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.fc[0].forward(g, x)?;
        let h = g.relu(h);
        let h = self.fc[1].forward(g, h)?;
        let h = g.sigmoid(h);
        self.fc[2].forward(g, h)
    }
}

/// Convolutional decoder from the joint space back to a `[3, sensors, 100]` window.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub sensors: usize,
    fc: Linear,
    norm: BatchNorm2d,
    deconvs: [ConvTranspose2d; 3],
}

impl Decoder {
    pub fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, prefix: &str, sensors: usize, rng: &mut R) -> Result<Self> {
        if sensors == 0 {
            return Err(Error::Parameter("decoder needs at least one sensor".into()));
        }
        let [c1, c2, c3] = DECODER_CHANNELS;
        let seed_len = WINDOW_LEN / 4;
        let k = (1, DECODER_KERNEL);
        Ok(Self {
            sensors,
            fc: Linear::new(store, &format!("{prefix}.fc"), REP_DIM, c1 * sensors * seed_len, rng),
            norm: BatchNorm2d::new(store, &format!("{prefix}.norm"), c1),
            deconvs: [
                ConvTranspose2d::new(store, &format!("{prefix}.deconv1"), c1, c2, k, Padding::Same, rng),
                ConvTranspose2d::new(store, &format!("{prefix}.deconv2"), c2, c3, k, Padding::Same, rng),
                ConvTranspose2d::new(store, &format!("{prefix}.deconv3"), c3, AXES, k, Padding::Same, rng),
            ],
        })
    }

    /// The last block emits the reconstruction directly, without dropout or ReLU.
    pub fn forward<T: Float, R: Rng>(&self, g: &mut Graph<T>, rep: Var, rng: &mut R) -> Result<Var> {
        let b = g.shape(rep)[0];
        let h = self.fc.forward(g, rep)?;
        let h = g.reshape(h, &[b, DECODER_CHANNELS[0], self.sensors, WINDOW_LEN / 4])?;
        let h = self.norm.forward(g, h)?;
        let mut h = g.relu(h);
        for (i, d) in self.deconvs.iter().enumerate() {
            h = d.forward(g, h)?;
            if i < 2 {
                h = g.dropout(h, DECODER_DROPOUT, rng)?;
                h = g.relu(h);
                h = g.upsample2d(h, 1, 2)?;
            }
        }
        Ok(h)
    }

    /// Parameter ids of the final block, for initialization experiments.
    pub fn last_block(&self) -> &ConvTranspose2d {
        &self.deconvs[2]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ntx(z1: Vec<f64>, z2: Vec<f64>, b: usize, d: usize, tau: f64) -> f64 {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, false);
        let a = g.input(Tensor::new(&[b, d], z1).unwrap());
        let c = g.input(Tensor::new(&[b, d], z2).unwrap());
        let l = ntxent_loss(&mut g, a, c, tau).unwrap();
        g.value(l).item()
    }

    /// Direct evaluation of the NT-Xent definition.
    fn ntx_oracle(z1: &[f64], z2: &[f64], b: usize, d: usize, tau: f64) -> f64 {
        let all: Vec<&[f64]> = z1.chunks(d).chain(z2.chunks(d)).collect();
        let cos = |u: &[f64], v: &[f64]| crate::pretrain::cosine_sim(u, v).unwrap();
        (0..2 * b)
            .map(|i| {
                let pos = (i + b) % (2 * b);
                let z: f64 = (0..2 * b).filter(|&j| j != i).map(|j| (cos(all[i], all[j]) / tau).exp()).sum();
                -((cos(all[i], all[pos]) / tau).exp() / z).ln()
            })
            .sum::<f64>()
            / (2 * b) as f64
    }

    #[test]
    fn identical_views_give_ln3() {
        let v = vec![0.3, -0.4, 0.8, 0.3, -0.4, 0.8];
        assert!((ntx(v.clone(), v, 2, 3, 1.0) - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_negatives_vanish_at_low_temperature() {
        let z1 = vec![1.0, 0.0, 0.0, 1.0];
        let l = ntx(z1.clone(), z1, 2, 2, 0.01);
        assert!(l < 1e-30);
    }

    #[test]
    fn single_pair_is_rejected() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, false);
        let a = g.input(Tensor::full(&[1, 3], 1.0));
        assert!(matches!(ntxent_loss(&mut g, a, a, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn head_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let head = SimclrHead::new(&mut store, "h", &mut rng);
        let task = TaskHead::new(&mut store, "t", &mut rng);
        let g_store = store;
        let mut g = Graph::new(&g_store, false);
        let x = g.input(Tensor::full(&[4, REP_DIM], 0.1));
        let z = head.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(z), &[4, head.output_dim()]);
        assert_eq!(head.output_dim(), 128);
        let t = task.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(t), &[4, 1]);
    }

    #[test]
    fn decoder_reconstructs_window_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for sensors in 1..=3 {
            let mut store = ParamStore::<f32>::new();
            let dec = Decoder::new(&mut store, "d", sensors, &mut rng).unwrap();
            let mut g = Graph::new(&store, true);
            let x = g.input(Tensor::full(&[2, REP_DIM], 0.5));
            let y = dec.forward(&mut g, x, &mut rng).unwrap();
            assert_eq!(g.shape(y), &[2, AXES, sensors, WINDOW_LEN]);
        }
    }

    #[test]
    fn zeroed_last_block_reconstructs_zero_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let dec = Decoder::new(&mut store, "d", 2, &mut rng).unwrap();
        let last = dec.last_block().clone();
        store.get_mut(last.weight).data_mut().fill(0.0);
        store.get_mut(last.bias).data_mut().fill(0.0);
        let mut g = Graph::new(&store, false);
        let x = g.input(Tensor::full(&[3, REP_DIM], 0.2));
        let y = dec.forward(&mut g, x, &mut rng).unwrap();
        let target = Tensor::zeros(&[3, AXES, 2, WINDOW_LEN]);
        let mse = g.mse(y, &target).unwrap();
        assert_eq!(g.value(mse).item(), 0.0);
    }

    proptest! {
        #[test]
        fn matches_oracle(z1 in proptest::collection::vec(-1.0f64..1.0, 12), z2 in proptest::collection::vec(-1.0f64..1.0, 12), tau in 0.1f64..2.0) {
            let l = ntx(z1.clone(), z2.clone(), 4, 3, tau);
            prop_assert!(l >= 0.0);
            prop_assert!((l - ntx_oracle(&z1, &z2, 4, 3, tau)).abs() < 1e-9);
        }

        #[test]
        fn invariant_to_pair_permutation_and_rotation(z1 in proptest::collection::vec(-1.0f64..1.0, 8), z2 in proptest::collection::vec(-1.0f64..1.0, 8), shift in 1usize..4, angle in -3.0f64..3.0) {
            let base = ntx(z1.clone(), z2.clone(), 4, 2, 0.5);
            let perm = |z: &[f64]| -> Vec<f64> { (0..4).flat_map(|i| z[((i + shift) % 4) * 2..((i + shift) % 4) * 2 + 2].to_vec()).collect() };
            prop_assert!((base - ntx(perm(&z1), perm(&z2), 4, 2, 0.5)).abs() < 1e-9);
            let (s, c) = angle.sin_cos();
            let rot = |z: &[f64]| -> Vec<f64> { z.chunks(2).flat_map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]]).collect() };
            prop_assert!((base - ntx(rot(&z1), rot(&z2), 4, 2, 0.5)).abs() < 1e-9);
        }
    }
}
