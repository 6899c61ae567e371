//! Deterministic synthetic multimodal corpus.
//!
//! Each class is a periodic 17-joint motion: per joint and axis a fundamental
//! plus a second harmonic at a class-specific relative phase, so the motion
//! is neither time-reversal nor sign symmetric. Clips vary by time shift,
//! body scale, amplitude and tempo; frames carry additive noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::preprocess::{sliding_windows, trim_clip, virtual_accel_from_pose, ZScoreStats, GRAVITY};
use super::{Corpus, Modality, MultimodalWindow, Split, AXES, JOINTS, SAMPLE_RATE, TEXT_DIM, TRIM_RATIO, VIDEO_DIM, WINDOW_LEN, WINDOW_STRIDE};
use crate::error::{Error, Result};

/// Rest pose in metres: pelvis, right leg, left leg, spine, neck, head, left arm, right arm.
const REST: [[f64; 3]; JOINTS] = [
    [0.0, 0.0, 1.00],
    [-0.10, 0.0, 0.95],
    [-0.10, 0.0, 0.52],
    [-0.10, 0.0, 0.08],
    [0.10, 0.0, 0.95],
    [0.10, 0.0, 0.52],
    [0.10, 0.0, 0.08],
    [0.0, 0.0, 1.25],
    [0.0, 0.0, 1.48],
    [0.0, 0.0, 1.58],
    [0.0, 0.0, 1.72],
    [0.18, 0.0, 1.45],
    [0.20, 0.0, 1.17],
    [0.22, 0.0, 0.92],
    [-0.18, 0.0, 1.45],
    [-0.20, 0.0, 1.17],
    [-0.22, 0.0, 0.92],
];

/// How freely each joint moves relative to the body.
const MOBILITY: [f64; JOINTS] = [
    0.25, 0.35, 0.7, 1.0, 0.35, 0.7, 1.0, 0.3, 0.35, 0.4, 0.5, 0.5, 0.8, 1.0, 0.5, 0.8, 1.0,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub clips_per_class: usize,
    pub frames_per_clip: usize,
    /// Joints carrying a virtual accelerometer; its length is the sensor count.
    pub sensor_joints: Vec<usize>,
    /// Per-frame position noise, metres.
    pub pose_noise: f64,
    /// Accelerometer noise, m/s².
    pub sensor_noise: f64,
    /// Per-element noise on the unit-norm video prototype.
    pub video_noise: f64,
    /// Peak per-joint amplitude of the fundamental, metres.
    pub amplitude: f64,
    /// Relative clip-to-clip jitter of amplitude and tempo.
    pub clip_jitter: f64,
    /// Fraction of each class's motion shared by every class (0 = fully distinct).
    pub shared_motion: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 8,
            clips_per_class: 10,
            frames_per_clip: 500,
            sensor_joints: vec![16, 13],
            pose_noise: 0.01,
            sensor_noise: 1.0,
            video_noise: 0.02,
            amplitude: 0.12,
            clip_jitter: 0.1,
            shared_motion: 0.0,
            val_fraction: 0.2,
            test_fraction: 0.2,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_classes == 0 || self.clips_per_class == 0 {
            return bad("synthetic corpus needs at least one class and clip".into());
        }
        let kept = self.frames_per_clip - 2 * (TRIM_RATIO * self.frames_per_clip as f64).floor() as usize;
        if kept < WINDOW_LEN {
            return bad(format!(
                "frames_per_clip {} leaves {kept} frames after trimming, fewer than a window",
                self.frames_per_clip
            ));
        }
        if self.sensor_joints.is_empty() {
            return bad("sensor_joints must name at least one joint".into());
        }
        if let Some(j) = self.sensor_joints.iter().find(|&&j| j >= JOINTS) {
            return bad(format!("sensor joint {j} is not one of {JOINTS} joints"));
        }
        for (name, v) in [
            ("pose_noise", self.pose_noise),
            ("sensor_noise", self.sensor_noise),
            ("video_noise", self.video_noise),
            ("amplitude", self.amplitude),
            ("clip_jitter", self.clip_jitter),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.shared_motion) {
            return bad(format!("shared_motion {} outside [0, 1]", self.shared_motion));
        }
        if !(self.val_fraction >= 0.0 && self.test_fraction >= 0.0 && self.val_fraction + self.test_fraction < 1.0) {
            return bad("val_fraction + test_fraction must lie in [0, 1)".into());
        }
        Ok(())
    }

    fn sub_rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Per joint and axis harmonic coefficients of one class.
struct Motion {
    freq: f64,
    amp: Vec<[f64; 3]>,
    phase: Vec<[f64; 3]>,
    ratio: Vec<[f64; 3]>,
    phase2: Vec<[f64; 3]>,
}

impl Motion {
    fn draw(rng: &mut ChaCha8Rng, amplitude: f64) -> Self {
        let tau = std::f64::consts::TAU;
        let mut m = Motion {
            freq: rng.random_range(0.5..1.5),
            amp: Vec::with_capacity(JOINTS),
            phase: Vec::with_capacity(JOINTS),
            ratio: Vec::with_capacity(JOINTS),
            phase2: Vec::with_capacity(JOINTS),
        };
        for j in 0..JOINTS {
            m.amp.push(std::array::from_fn(|_| amplitude * MOBILITY[j] * rng.random_range(0.2..1.0)));
            m.phase.push(std::array::from_fn(|_| rng.random_range(0.0..tau)));
            m.ratio.push(std::array::from_fn(|_| rng.random_range(0.3..0.7)));
            m.phase2.push(std::array::from_fn(|_| rng.random_range(0.0..tau)));
        }
        m
    }

    fn blend(&self, shared: &Motion, w: f64) -> Motion {
        let mix = |a: &[[f64; 3]], b: &[[f64; 3]]| -> Vec<[f64; 3]> {
            a.iter().zip(b).map(|(x, y)| std::array::from_fn(|k| (1.0 - w) * x[k] + w * y[k])).collect()
        };
        Motion {
            freq: (1.0 - w) * self.freq + w * shared.freq,
            amp: mix(&self.amp, &shared.amp),
            phase: mix(&self.phase, &shared.phase),
            ratio: mix(&self.ratio, &shared.ratio),
            phase2: mix(&self.phase2, &shared.phase2),
        }
    }

    fn displacement(&self, j: usize, axis: usize, t: f64, omega: f64) -> f64 {
        let a = self.amp[j][axis];
        a * ((omega * t + self.phase[j][axis]).sin() + self.ratio[j][axis] * (2.0 * omega * t + self.phase2[j][axis]).sin())
    }
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    let v: Vec<f64> = (0..dim).map(|_| Normal::new(0.0, 1.0).unwrap().sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / norm) as f32).collect()
}

/// Builds the corpus; pose and sensor channels are z-scored with train-split statistics.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let s_n = cfg.sensor_joints.len();
    let mut proto_rng = cfg.sub_rng(1);
    let text_protos: Vec<Vec<f32>> = (0..cfg.n_classes).map(|_| unit_gaussian(&mut proto_rng, TEXT_DIM)).collect();
    let video_protos: Vec<Vec<f32>> = (0..cfg.n_classes).map(|_| unit_gaussian(&mut proto_rng, VIDEO_DIM)).collect();
    let mut motion_rng = cfg.sub_rng(2);
    let shared = Motion::draw(&mut motion_rng, cfg.amplitude);
    let motions: Vec<Motion> = (0..cfg.n_classes)
        .map(|_| Motion::draw(&mut motion_rng, cfg.amplitude).blend(&shared, cfg.shared_motion))
        .collect();

    let n_val = (cfg.val_fraction * cfg.clips_per_class as f64).round() as usize;
    let n_test = (cfg.test_fraction * cfg.clips_per_class as f64).round() as usize;
    let n_train = cfg.clips_per_class.saturating_sub(n_val + n_test).max(1);

    let mut split_rng = cfg.sub_rng(3);
    let mut clip_rng = cfg.sub_rng(4);
    let mut noise_rng = cfg.sub_rng(5);
    let pose_noise = Normal::new(0.0, cfg.pose_noise).unwrap();
    let sensor_noise = Normal::new(0.0, cfg.sensor_noise).unwrap();
    let video_noise = Normal::new(0.0, cfg.video_noise).unwrap();
    let names = (0..cfg.n_classes).map(|c| format!("class_{c}")).collect();
    let mut corpus = Corpus::new(names, s_n);
    let frames = cfg.frames_per_clip;
    let fs = SAMPLE_RATE;

    for (c, motion) in motions.iter().enumerate() {
        let mut order: Vec<usize> = (0..cfg.clips_per_class).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, split_rng.random_range(0..=i));
        }
        let mut split_of = vec![Split::Train; cfg.clips_per_class];
        for (rank, &k) in order.iter().enumerate() {
            split_of[k] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        for k in 0..cfg.clips_per_class {
            let clip_id = (c * cfg.clips_per_class + k) as u32;
            let shift = clip_rng.random_range(0.0..10.0);
            let body = 1.0 + cfg.clip_jitter * clip_rng.random_range(-1.0..1.0);
            let gain = 1.0 + cfg.clip_jitter * clip_rng.random_range(-1.0..1.0);
            let omega = std::f64::consts::TAU * motion.freq * (1.0 + 0.5 * cfg.clip_jitter * clip_rng.random_range(-1.0..1.0));

            // [axis][joint][frame] of the noise-free clip.
            let mut clean = vec![0.0f32; AXES * JOINTS * frames];
            for axis in 0..AXES {
                for j in 0..JOINTS {
                    let base = body * REST[j][axis];
                    let row = &mut clean[(axis * JOINTS + j) * frames..(axis * JOINTS + j + 1) * frames];
                    for (f, v) in row.iter_mut().enumerate() {
                        let t = f as f64 / fs + shift;
                        *v = (base + gain * body * motion.displacement(j, axis, t, omega)) as f32;
                    }
                }
            }
            let mut sensor = vec![0.0f32; AXES * s_n * frames];
            for (s, &j) in cfg.sensor_joints.iter().enumerate() {
                let mut track = vec![0.0f32; AXES * frames];
                for axis in 0..AXES {
                    let src = (axis * JOINTS + j) * frames;
                    track[axis * frames..(axis + 1) * frames].copy_from_slice(&clean[src..src + frames]);
                }
                let acc = virtual_accel_from_pose(&track, fs, GRAVITY)?;
                for axis in 0..AXES {
                    let dst = (axis * s_n + s) * frames;
                    for f in 0..frames {
                        sensor[dst + f] = acc[axis * frames + f] + sensor_noise.sample(&mut noise_rng) as f32;
                    }
                }
            }
            let mut pose = clean;
            for v in pose.iter_mut() {
                *v += pose_noise.sample(&mut noise_rng) as f32;
            }

            let frame_idx: Vec<usize> = (0..frames).collect();
            let kept = trim_clip(&frame_idx, TRIM_RATIO)?;
            for start in sliding_windows(kept.len(), WINDOW_LEN, WINDOW_STRIDE)? {
                let f0 = kept[start];
                let cut = |src: &[f32], rows: usize| -> Vec<f32> {
                    (0..rows).flat_map(|r| src[r * frames + f0..r * frames + f0 + WINDOW_LEN].iter().copied()).collect()
                };
                let video = video_protos[c]
                    .iter()
                    .map(|&p| p + video_noise.sample(&mut noise_rng) as f32)
                    .collect();
                corpus.windows.push(MultimodalWindow {
                    text: Some(text_protos[c].clone()),
                    video: Some(video),
                    pose: Some(cut(&pose, AXES * JOINTS)),
                    sensor: Some(cut(&sensor, AXES * s_n)),
                    label: Some(c as u32),
                    subject: clip_id,
                    clip: clip_id,
                    split: split_of[k],
                });
            }
        }
    }
    normalize_train_fit(&mut corpus)?;
    Ok(corpus)
}

/// Fits z-score statistics on the train split and applies them to every window.
pub(crate) fn normalize_train_fit(corpus: &mut Corpus) -> Result<()> {
    for m in [Modality::Pose, Modality::Sensor] {
        let channels = m.channels(corpus.sensors);
        let train: Vec<&[f32]> = corpus
            .windows
            .iter()
            .filter(|w| w.split == Split::Train)
            .filter_map(|w| w.payload(m))
            .collect();
        if train.is_empty() {
            continue;
        }
        let stats = ZScoreStats::fit(train, channels)?;
        for w in &mut corpus.windows {
            if let Some(p) = w.payload_mut(m) {
                stats.apply(p)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            n_classes: 3,
            clips_per_class: 5,
            frames_per_clip: 200,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn reference_size_yields_480_windows() {
        let c = synth_generate(&SynthConfig::default()).unwrap();
        assert_eq!(c.windows.len(), 480);
        assert_eq!(c.sensors, 2);
        c.validate().unwrap();
        assert_eq!(c.split(Split::Train).count(), 8 * 6 * 6);
        assert_eq!(c.split(Split::Val).count(), 8 * 2 * 6);
        assert_eq!(c.split(Split::Test).count(), 8 * 2 * 6);
    }

    #[test]
    fn same_seed_same_corpus() {
        assert_eq!(synth_generate(&small(3)).unwrap(), synth_generate(&small(3)).unwrap());
        assert_ne!(synth_generate(&small(3)).unwrap(), synth_generate(&small(4)).unwrap());
    }

    #[test]
    fn text_is_shared_within_class_only() {
        let c = synth_generate(&small(1)).unwrap();
        let of = |l: u32| c.windows.iter().filter(move |w| w.label == Some(l));
        let first = of(0).next().unwrap().text.clone();
        assert!(of(0).all(|w| w.text == first));
        assert_ne!(of(1).next().unwrap().text, first);
        let norm: f32 = first.unwrap().iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-5);
    }

    #[test]
    fn windows_stay_inside_one_clip() {
        let c = synth_generate(&SynthConfig {
            frames_per_clip: 250,
            ..small(2)
        })
        .unwrap();
        // 250 frames trim to 176, giving two windows per clip.
        assert_eq!(c.windows.len(), 3 * 5 * 2);
        for pair in c.windows.chunks(2) {
            assert_eq!(pair[0].clip, pair[1].clip);
        }
    }

    #[test]
    fn short_clips_are_rejected() {
        let cfg = SynthConfig {
            frames_per_clip: 120,
            ..small(0)
        };
        assert!(matches!(synth_generate(&cfg), Err(Error::Config(_))));
    }
}
