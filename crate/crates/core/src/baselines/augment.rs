//! Signal transformations on sensor windows laid out `[axis][sensor][frame]`.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::AXES;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Noise,
    Scale,
    Negate,
    Hflip,
    Permute4,
    ChannelShuffle,
    Rotate3d,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 7] = [
        AugmentKind::Noise,
        AugmentKind::Scale,
        AugmentKind::Negate,
        AugmentKind::Hflip,
        AugmentKind::Permute4,
        AugmentKind::ChannelShuffle,
        AugmentKind::Rotate3d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentKind::Noise => "noise",
            AugmentKind::Scale => "scale",
            AugmentKind::Negate => "negate",
            AugmentKind::Hflip => "hflip",
            AugmentKind::Permute4 => "permute4",
            AugmentKind::ChannelShuffle => "channel_shuffle",
            AugmentKind::Rotate3d => "rotate3d",
        }
    }
}

impl FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AugmentKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::Input(format!("unknown augmentation '{s}'")))
    }
}

impl std::fmt::Display for AugmentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub kind: AugmentKind,
    /// Standard deviation of additive noise and of the multiplicative factors around 1.
    pub sigma: f64,
    /// Rotation angles are drawn uniformly from `(-max_angle, max_angle)`.
    pub max_angle: f64,
}

impl AugmentationSpec {
    pub fn new(kind: AugmentKind) -> Self {
        Self {
            kind,
            sigma: 0.05,
            max_angle: PI,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("augmentation sigma must be non-negative, got {}", self.sigma)));
        }
        if !(self.max_angle > 0.0 && self.max_angle <= PI) {
            return Err(Error::Config(format!("rotation range must lie in (0, pi], got {}", self.max_angle)));
        }
        Ok(())
    }
}

fn frames_of(window: &[f32], sensors: usize) -> Result<usize> {
    let rows = AXES * sensors;
    if sensors == 0 || window.is_empty() || window.len() % rows != 0 {
        return Err(Error::dim("augment", &[window.len()], &[AXES, sensors]));
    }
    Ok(window.len() / rows)
}

/// Applies one random draw of `spec` to `window`.
pub fn augment<R: Rng>(window: &[f32], sensors: usize, spec: &AugmentationSpec, rng: &mut R) -> Result<Vec<f32>> {
    spec.validate()?;
    let frames = frames_of(window, sensors)?;
    Ok(match spec.kind {
        AugmentKind::Noise => {
            let n = Normal::new(0.0, spec.sigma).map_err(|e| Error::Config(e.to_string()))?;
            window.iter().map(|&v| (v as f64 + n.sample(rng)) as f32).collect()
        }
        AugmentKind::Scale => {
            let n = Normal::new(1.0, spec.sigma).map_err(|e| Error::Config(e.to_string()))?;
            window.iter().map(|&v| (v as f64 * n.sample(rng)) as f32).collect()
        }
        AugmentKind::Negate => negate(window),
        AugmentKind::Hflip => hflip(window, frames),
        AugmentKind::Permute4 => {
            let mut perm = [0, 1, 2, 3];
            while perm == [0, 1, 2, 3] {
                perm.shuffle(rng);
            }
            permute_segments(window, sensors, perm)?
        }
        AugmentKind::ChannelShuffle => {
            let mut perm = [0, 1, 2];
            while perm == [0, 1, 2] {
                perm.shuffle(rng);
            }
            shuffle_axes(window, sensors, perm)?
        }
        AugmentKind::Rotate3d => {
            let axis: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
            let angle = rng.random_range(-spec.max_angle..spec.max_angle);
            rotate(window, sensors, &rotation_matrix(axis, angle)?)?
        }
    })
}

pub fn negate(window: &[f32]) -> Vec<f32> {
    window.iter().map(|v| -v).collect()
}

/// Reverses every channel in time.
pub fn hflip(window: &[f32], frames: usize) -> Vec<f32> {
    window.chunks(frames).flat_map(|row| row.iter().rev().copied()).collect()
}

/// Splits time into four segments (the remainder goes to the last) and
/// reorders them so that output segment `i` is input segment `perm[i]`.
pub fn permute_segments(window: &[f32], sensors: usize, perm: [usize; 4]) -> Result<Vec<f32>> {
    let frames = frames_of(window, sensors)?;
    let mut sorted = perm;
    sorted.sort_unstable();
    if sorted != [0, 1, 2, 3] {
        return Err(Error::Input(format!("{perm:?} is not a permutation of four segments")));
    }
    let seg = frames / 4;
    if seg == 0 {
        return Err(Error::dim("permute4", &[frames], &[4]));
    }
    let bounds = [0, seg, 2 * seg, 3 * seg, frames];
    let mut out = Vec::with_capacity(window.len());
    for row in window.chunks(frames) {
        for &p in &perm {
            out.extend_from_slice(&row[bounds[p]..bounds[p + 1]]);
        }
    }
    Ok(out)
}

/// Output axis `i` takes input axis `perm[i]`.
pub fn shuffle_axes(window: &[f32], sensors: usize, perm: [usize; 3]) -> Result<Vec<f32>> {
    let frames = frames_of(window, sensors)?;
    let plane = sensors * frames;
    let mut out = Vec::with_capacity(window.len());
    for &p in &perm {
        if p >= AXES {
            return Err(Error::Input(format!("axis {p} out of range")));
        }
        out.extend_from_slice(&window[p * plane..(p + 1) * plane]);
    }
    Ok(out)
}

/// Rotation by `angle` about `axis` (normalized here).
pub fn rotation_matrix(axis: [f64; 3], angle: f64) -> Result<[[f64; 3]; 3]> {
    let n = axis.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 0.0) {
        return Err(Error::Input("rotation axis must be non-zero".into()));
    }
    let [x, y, z] = axis.map(|v| v / n);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    Ok([
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ])
}

/// Applies `rot` to every sensor's 3-axis vector at every frame.
pub fn rotate(window: &[f32], sensors: usize, rot: &[[f64; 3]; 3]) -> Result<Vec<f32>> {
    let frames = frames_of(window, sensors)?;
    let plane = sensors * frames;
    let mut out = vec![0f32; window.len()];
    for i in 0..plane {
        let v = [window[i] as f64, window[plane + i] as f64, window[2 * plane + i] as f64];
        for (a, r) in rot.iter().enumerate() {
            out[a * plane + i] = (r[0] * v[0] + r[1] * v[1] + r[2] * v[2]) as f32;
        }
    }
    Ok(out)
}
