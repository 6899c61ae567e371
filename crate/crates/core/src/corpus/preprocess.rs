//! Trimming, windowing, normalization, resampling and virtual accelerometry.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// World-frame gravity in m/s².
pub const GRAVITY: [f64; 3] = [0.0, 0.0, -9.81];

/// Drops `floor(ratio·N)` frames from each end of a clip.
pub fn trim_clip<T: Clone>(clip: &[T], ratio: f64) -> Result<Vec<T>> {
    if !(0.0..0.5).contains(&ratio) {
        return Err(Error::Parameter(format!("trim ratio {ratio} outside [0, 0.5)")));
    }
    let cut = (ratio * clip.len() as f64).floor() as usize;
    if 2 * cut >= clip.len() {
        return Ok(Vec::new());
    }
    Ok(clip[cut..clip.len() - cut].to_vec())
}

/// Number of windows of `window` frames at `stride` over `len` frames.
pub fn window_count(len: usize, window: usize, stride: usize) -> usize {
    if window == 0 || stride == 0 || len < window {
        0
    } else {
        (len - window) / stride + 1
    }
}

/// Window start offsets: `0, stride, 2·stride, ...` while a full window fits.
pub fn sliding_windows(len: usize, window: usize, stride: usize) -> Result<Vec<usize>> {
    if window == 0 || stride == 0 || stride > window {
        return Err(Error::Parameter(format!(
            "window {window} / stride {stride} must satisfy 0 < stride <= window"
        )));
    }
    Ok((0..window_count(len, window, stride)).map(|i| i * stride).collect())
}

/// Per-channel standardization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZScoreStats {
    pub mean: Vec<f32>,
    /// Always positive; degenerate channels store 1 and are flagged.
    pub std: Vec<f32>,
    pub degenerate: Vec<bool>,
}

/// Channels whose population std falls below this are mapped to zero.
pub const DEGENERATE_STD: f64 = 1e-8;

impl ZScoreStats {
    /// Fits population mean/std per channel over arrays laid out `[channels][frames]`.
    pub fn fit<'a, I>(arrays: I, channels: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f32]>,
    {
        let mut sum = vec![0.0f64; channels];
        let mut count = vec![0usize; channels];
        let arrays: Vec<&[f32]> = arrays.into_iter().collect();
        for a in &arrays {
            if channels == 0 || a.len() % channels != 0 {
                return Err(Error::dim("zscore_fit", &[channels], &[a.len()]));
            }
            let frames = a.len() / channels;
            for (c, row) in a.chunks(frames.max(1)).enumerate().take(channels) {
                sum[c] += row.iter().map(|&v| v as f64).sum::<f64>();
                count[c] += row.len();
            }
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 }).collect();
        let mut sq = vec![0.0f64; channels];
        for a in &arrays {
            let frames = a.len() / channels;
            for (c, row) in a.chunks(frames.max(1)).enumerate().take(channels) {
                sq[c] += row.iter().map(|&v| (v as f64 - mean[c]).powi(2)).sum::<f64>();
            }
        }
        let mut stats = ZScoreStats {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std: Vec::with_capacity(channels),
            degenerate: Vec::with_capacity(channels),
        };
        for c in 0..channels {
            let std = if count[c] == 0 { 0.0 } else { (sq[c] / count[c] as f64).sqrt() };
            let degenerate = std < DEGENERATE_STD;
            stats.std.push(if degenerate { 1.0 } else { std as f32 });
            stats.degenerate.push(degenerate);
        }
        Ok(stats)
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Standardizes `[channels][frames]` in place.
    pub fn apply(&self, array: &mut [f32]) -> Result<()> {
        let channels = self.channels();
        if channels == 0 || array.len() % channels != 0 {
            return Err(Error::dim("zscore_apply", &[channels], &[array.len()]));
        }
        let frames = array.len() / channels;
        for (c, row) in array.chunks_mut(frames.max(1)).enumerate().take(channels) {
            if self.degenerate[c] {
                row.fill(0.0);
                continue;
            }
            let (m, s) = (self.mean[c] as f64, self.std[c] as f64);
            for v in row {
                *v = ((*v as f64 - m) / s) as f32;
            }
        }
        Ok(())
    }
}

/// Second finite difference of a `[axis][frame]` position track, minus gravity.
///
/// Endpoints copy their neighbours' values.
pub fn virtual_accel_from_pose(track: &[f32], fs: f64, gravity: [f64; 3]) -> Result<Vec<f32>> {
    if track.len() % 3 != 0 {
        return Err(Error::Input(format!("track length {} is not 3·T", track.len())));
    }
    let t = track.len() / 3;
    if t < 3 {
        return Err(Error::Input(format!("virtual accelerometry needs at least 3 frames, got {t}")));
    }
    let fs2 = fs * fs;
    let mut out = vec![0.0f32; track.len()];
    for axis in 0..3 {
        let p = &track[axis * t..(axis + 1) * t];
        let a = &mut out[axis * t..(axis + 1) * t];
        for i in 1..t - 1 {
            let d2 = p[i + 1] as f64 - 2.0 * p[i] as f64 + p[i - 1] as f64;
            a[i] = (d2 * fs2 - gravity[axis]) as f32;
        }
        a[0] = a[1];
        a[t - 1] = a[t - 2];
    }
    Ok(out)
}

/// Linear-interpolation resampling of a uniformly sampled signal.
///
/// Output sample `k` is read at time `k / to_hz`; the result covers the input
/// duration, `floor((n-1)·to_hz/from_hz) + 1` samples.
pub fn resample_linear(signal: &[f64], from_hz: f64, to_hz: f64) -> Result<Vec<f64>> {
    if !(from_hz > 0.0 && to_hz > 0.0) {
        return Err(Error::Parameter(format!("invalid sample rates {from_hz} -> {to_hz}")));
    }
    if signal.is_empty() || from_hz == to_hz {
        return Ok(signal.to_vec());
    }
    let ratio = from_hz / to_hz;
    // Guard against 199·0.5 style products landing a hair below an integer.
    let n_out = (((signal.len() - 1) as f64 / ratio) + 1e-9).floor() as usize + 1;
    Ok((0..n_out)
        .map(|k| {
            let pos = k as f64 * ratio;
            let i = pos.floor() as usize;
            if i + 1 >= signal.len() {
                signal[signal.len() - 1]
            } else {
                let frac = pos - i as f64;
                signal[i] * (1.0 - frac) + signal[i + 1] * frac
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn trim_reference_cases() {
        let clip: Vec<usize> = (0..200).collect();
        let kept = trim_clip(&clip, 0.15).unwrap();
        assert_eq!((kept.len(), kept[0], *kept.last().unwrap()), (140, 30, 169));
        let clip: Vec<usize> = (0..100).collect();
        let kept = trim_clip(&clip, 0.15).unwrap();
        assert_eq!((kept.len(), kept[0], *kept.last().unwrap()), (70, 15, 84));
        let clip: Vec<usize> = (0..10).collect();
        let kept = trim_clip(&clip, 0.15).unwrap();
        assert_eq!((kept.len(), kept[0], *kept.last().unwrap()), (8, 1, 8));
        assert!(trim_clip(&clip, 0.5).is_err());
        assert!(trim_clip::<u8>(&[], 0.15).unwrap().is_empty());
    }

    #[test]
    fn window_reference_cases() {
        assert_eq!(sliding_windows(250, 100, 50).unwrap(), vec![0, 50, 100, 150]);
        assert_eq!(sliding_windows(100, 100, 50).unwrap(), vec![0]);
        assert!(sliding_windows(99, 100, 50).unwrap().is_empty());
        assert!(sliding_windows(300, 100, 101).is_err());
    }

    #[test]
    fn zscore_hand_computation() {
        let stats = ZScoreStats::fit([&[1.0f32, 2.0, 3.0][..]], 1).unwrap();
        assert!((stats.mean[0] - 2.0).abs() < 1e-7);
        assert!((stats.std[0] - 0.816_496_6).abs() < 1e-6);
        let mut x = vec![1.0f32, 2.0, 3.0];
        stats.apply(&mut x).unwrap();
        for (a, b) in x.iter().zip([-1.224_744_9f32, 0.0, 1.224_744_9]) {
            assert!((a - b).abs() < 1e-5);
        }
        // A second application is not the identity.
        let before = x.clone();
        stats.apply(&mut x).unwrap();
        assert_ne!(x, before);
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let data = [5.0f32, 5.0, 5.0, 1.0, 2.0, 4.0];
        let stats = ZScoreStats::fit([&data[..]], 2).unwrap();
        assert!(stats.degenerate[0] && !stats.degenerate[1]);
        assert!(stats.std.iter().all(|&s| s > 0.0));
        let mut x = data;
        stats.apply(&mut x).unwrap();
        assert_eq!(&x[..3], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn accel_of_constant_and_linear_tracks() {
        let t = 20;
        let mut track = vec![0.0f32; 3 * t];
        for i in 0..t {
            track[i] = 1.5;
            track[t + i] = -0.2 + 0.01 * i as f32;
            track[2 * t + i] = 0.9;
        }
        let a = virtual_accel_from_pose(&track, 50.0, GRAVITY).unwrap();
        for i in 0..t {
            assert_eq!(a[i], 0.0);
            assert!(a[t + i].abs() < 1e-3);
            assert!((a[2 * t + i] - 9.81).abs() < 1e-6);
        }
        assert!(virtual_accel_from_pose(&[0.0; 6], 50.0, GRAVITY).is_err());
    }

    #[test]
    fn accel_of_sinusoid_matches_analytic_second_derivative() {
        let (amp, omega, fs) = (0.1f64, 2.0 * std::f64::consts::PI, 50.0);
        let t = 200;
        let mut track = vec![0.0f32; 3 * t];
        for i in 0..t {
            track[i] = (amp * (omega * i as f64 / fs).sin()) as f32;
        }
        let a = virtual_accel_from_pose(&track, fs, [0.0; 3]).unwrap();
        let peak = amp * omega * omega;
        for i in 1..t - 1 {
            let exact = -amp * omega * omega * (omega * i as f64 / fs).sin();
            assert!((a[i] as f64 - exact).abs() < 0.02 * peak, "frame {i}");
        }
    }

    #[test]
    fn resample_100_to_50() {
        let sig: Vec<f64> = (0..200).map(|v| v as f64).collect();
        let out = resample_linear(&sig, 100.0, 50.0).unwrap();
        assert_eq!(out.len(), 100);
        assert_eq!(out[1], 2.0);
        assert_eq!(out[99], 198.0);
    }

    proptest! {
        #[test]
        fn window_count_matches_enumeration(len in 0usize..2000, window in 1usize..300, stride_frac in 0.01f64..1.0) {
            let stride = ((window as f64 * stride_frac).ceil() as usize).clamp(1, window);
            let starts = sliding_windows(len, window, stride).unwrap();
            let brute = (0..len).filter(|s| s % stride == 0 && s + window <= len).count();
            prop_assert_eq!(starts.len(), brute);
            prop_assert!(starts.iter().all(|s| s + window <= len));
        }

        #[test]
        fn zscore_standardizes_fitting_data(values in proptest::collection::vec(-50.0f32..50.0, 8..200), offset in -100.0f32..100.0) {
            let data: Vec<f32> = values.iter().map(|v| v + offset).collect();
            let stats = ZScoreStats::fit([&data[..]], 1).unwrap();
            prop_assume!(!stats.degenerate[0] && stats.std[0] > 1e-2);
            let mut x = data.clone();
            stats.apply(&mut x).unwrap();
            let n = x.len() as f64;
            let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
            let std = (x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((std - 1.0).abs() < 1e-4);
        }

        #[test]
        fn affine_tracks_read_as_gravity(p0 in -2.0f64..2.0, v in -1.0f64..1.0) {
            let t = 30;
            let track: Vec<f32> = (0..3 * t).map(|i| (p0 + v * (i % t) as f64 / 50.0) as f32).collect();
            let a = virtual_accel_from_pose(&track, 50.0, GRAVITY).unwrap();
            for (i, &val) in a.iter().enumerate() {
                let expected = -GRAVITY[i / t];
                // f32 rounding of positions is amplified by fs² = 2500.
                prop_assert!((val as f64 - expected).abs() < 2e-3);
            }
        }
    }
}
