//! Windowed multimodal instances and everything that produces them.

mod format;
mod ingest;
mod preprocess;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{corpus_read, corpus_read_from, corpus_write, corpus_write_to, FORMAT_VERSION, MAGIC};
pub use ingest::{ingest_csv, ingest_csv_files, CsvSchema, SplitFractions};
pub use preprocess::{resample_linear, sliding_windows, trim_clip, virtual_accel_from_pose, window_count, ZScoreStats, GRAVITY};
pub use synth::{synth_generate, SynthConfig};

pub const TEXT_DIM: usize = 1536;
pub const VIDEO_DIM: usize = 1024;
pub const JOINTS: usize = 17;
pub const AXES: usize = 3;
pub const WINDOW_LEN: usize = 100;
pub const WINDOW_STRIDE: usize = 50;
pub const SAMPLE_RATE: f64 = 50.0;
pub const TRIM_RATIO: f64 = 0.15;

/// Name of the "no activity" class.
pub const NULL_LABEL: &str = "NULL";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Video,
    Pose,
    Sensor,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Text, Modality::Video, Modality::Pose, Modality::Sensor];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Video => "video",
            Modality::Pose => "pose",
            Modality::Sensor => "sensor",
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Modality::Text => 1,
            Modality::Video => 2,
            Modality::Pose => 4,
            Modality::Sensor => 8,
        }
    }

    /// Flat payload length for a window with `sensors` sensors.
    pub fn payload_len(self, sensors: usize) -> usize {
        match self {
            Modality::Text => TEXT_DIM,
            Modality::Video => VIDEO_DIM,
            Modality::Pose => AXES * JOINTS * WINDOW_LEN,
            Modality::Sensor => AXES * sensors * WINDOW_LEN,
        }
    }

    /// Per-window input shape excluding the batch axis.
    pub fn input_shape(self, sensors: usize) -> Vec<usize> {
        match self {
            Modality::Text => vec![TEXT_DIM],
            Modality::Video => vec![VIDEO_DIM],
            Modality::Pose => vec![AXES, JOINTS, WINDOW_LEN],
            Modality::Sensor => vec![AXES, sensors, WINDOW_LEN],
        }
    }

    /// Number of z-scored channels (rows of `WINDOW_LEN` frames); 0 for embeddings.
    pub fn channels(self, sensors: usize) -> usize {
        match self {
            Modality::Text | Modality::Video => 0,
            Modality::Pose => AXES * JOINTS,
            Modality::Sensor => AXES * sensors,
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "text" => Ok(Modality::Text),
            "video" => Ok(Modality::Video),
            "pose" => Ok(Modality::Pose),
            "sensor" | "acc" | "imu" => Ok(Modality::Sensor),
            other => Err(Error::Input(format!("unknown modality '{other}'"))),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub(crate) fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

/// One 100-frame instance with up to four aligned modality payloads.
///
/// Pose is laid out `[axis][joint][frame]`, sensor `[axis][sensor][frame]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalWindow {
    pub text: Option<Vec<f32>>,
    pub video: Option<Vec<f32>>,
    pub pose: Option<Vec<f32>>,
    pub sensor: Option<Vec<f32>>,
    pub label: Option<u32>,
    pub subject: u32,
    pub clip: u32,
    pub split: Split,
}

impl MultimodalWindow {
    pub fn payload(&self, m: Modality) -> Option<&[f32]> {
        match m {
            Modality::Text => self.text.as_deref(),
            Modality::Video => self.video.as_deref(),
            Modality::Pose => self.pose.as_deref(),
            Modality::Sensor => self.sensor.as_deref(),
        }
    }

    pub fn payload_mut(&mut self, m: Modality) -> Option<&mut Vec<f32>> {
        match m {
            Modality::Text => self.text.as_mut(),
            Modality::Video => self.video.as_mut(),
            Modality::Pose => self.pose.as_mut(),
            Modality::Sensor => self.sensor.as_mut(),
        }
    }

    pub fn has(&self, m: Modality) -> bool {
        self.payload(m).is_some()
    }

    pub fn presence(&self) -> u8 {
        Modality::ALL.iter().filter(|m| self.has(**m)).map(|m| m.bit()).sum()
    }

    pub fn validate(&self, sensors: usize) -> Result<()> {
        if self.presence() == 0 {
            return Err(Error::Data(format!("window of clip {} carries no modality", self.clip)));
        }
        for m in Modality::ALL {
            if let Some(p) = self.payload(m) {
                let want = m.payload_len(sensors);
                if p.len() != want {
                    return Err(Error::Data(format!(
                        "{m} payload of clip {} has {} values, expected {want}",
                        self.clip,
                        p.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// An ordered collection of windows with class names and sensor count.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub windows: Vec<MultimodalWindow>,
    pub label_names: Vec<String>,
    pub sensors: usize,
}

impl Corpus {
    pub fn new(label_names: Vec<String>, sensors: usize) -> Self {
        Self {
            windows: Vec::new(),
            label_names,
            sensors,
        }
    }

    pub fn sample_rate(&self) -> f64 {
        SAMPLE_RATE
    }

    pub fn class_count(&self) -> usize {
        self.label_names.len()
    }

    pub fn null_label(&self) -> Option<u32> {
        self.label_names
            .iter()
            .position(|n| n.eq_ignore_ascii_case(NULL_LABEL))
            .map(|i| i as u32)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &MultimodalWindow> {
        self.windows.iter().filter(move |w| w.split == split)
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.windows.len()).filter(|&i| self.windows[i].split == split).collect()
    }

    /// Modalities present in every window.
    pub fn common_modalities(&self) -> Vec<Modality> {
        Modality::ALL
            .into_iter()
            .filter(|&m| !self.windows.is_empty() && self.windows.iter().all(|w| w.has(m)))
            .collect()
    }

    /// Checks label ranges, payload sizes, and that no clip or subject spans two splits.
    pub fn validate(&self) -> Result<()> {
        use std::collections::HashMap;
        let mut clip_split: HashMap<u32, Split> = HashMap::new();
        let mut subject_split: HashMap<u32, Split> = HashMap::new();
        for w in &self.windows {
            w.validate(self.sensors)?;
            if let Some(l) = w.label {
                if l as usize >= self.label_names.len() {
                    return Err(Error::Data(format!(
                        "label {l} out of range for {} classes",
                        self.label_names.len()
                    )));
                }
            }
            for (map, key, what) in [(&mut clip_split, w.clip, "clip"), (&mut subject_split, w.subject, "subject")] {
                if let Some(prev) = map.insert(key, w.split) {
                    if prev != w.split {
                        return Err(Error::Data(format!("{what} {key} appears in {prev:?} and {:?}", w.split)));
                    }
                }
            }
        }
        Ok(())
    }

    /// Per-class window counts within one split.
    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.class_count()];
        for w in self.split(split) {
            if let Some(l) = w.label {
                counts[l as usize] += 1;
            }
        }
        counts
    }

    /// Copy without windows carrying the NULL label.
    pub fn without_null(&self) -> Corpus {
        let null = self.null_label();
        Corpus {
            windows: self
                .windows
                .iter()
                .filter(|w| null.is_none() || w.label != null)
                .cloned()
                .collect(),
            label_names: self.label_names.clone(),
            sensors: self.sensors,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window(clip: u32, subject: u32, split: Split) -> MultimodalWindow {
        MultimodalWindow {
            text: Some(vec![0.0; TEXT_DIM]),
            video: None,
            pose: None,
            sensor: None,
            label: Some(0),
            subject,
            clip,
            split,
        }
    }

    #[test]
    fn window_without_modalities_is_invalid() {
        let mut w = window(0, 0, Split::Train);
        w.text = None;
        assert!(w.validate(1).is_err());
    }

    #[test]
    fn clip_across_splits_is_rejected() {
        let mut c = Corpus::new(vec!["a".into()], 1);
        c.windows.push(window(0, 0, Split::Train));
        c.windows.push(window(0, 0, Split::Val));
        assert!(matches!(c.validate(), Err(Error::Data(_))));
    }

    #[test]
    fn modality_parsing() {
        assert_eq!("Sensor".parse::<Modality>().unwrap(), Modality::Sensor);
        assert!("audio".parse::<Modality>().is_err());
    }
}
