//! The `FMC1` binary corpus container.
//!
//! Header: magic, u32 version, u32 window count, u16 sensor count, u16 class
//! count, then u16-length-prefixed UTF-8 class names. Each window record is a
//! u8 flags byte, u32 clip, u32 subject, i32 label (-1 for none), followed by
//! the present payloads as little-endian f32 in text, video, pose, sensor order.
//! Bits 0-3 of the flags byte mark modalities; bits 4-5 hold the split.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::{Corpus, Modality, MultimodalWindow, Split};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FMC1";
pub const FORMAT_VERSION: u32 = 1;

const SPLIT_SHIFT: u8 = 4;

pub fn corpus_write(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    corpus_write_to(corpus, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn corpus_write_to<W: Write>(corpus: &Corpus, w: &mut W) -> Result<()> {
    corpus.validate()?;
    let count = u32::try_from(corpus.windows.len()).map_err(|_| Error::Data("too many windows".into()))?;
    let sensors = u16::try_from(corpus.sensors).map_err(|_| Error::Data("too many sensors".into()))?;
    let classes = u16::try_from(corpus.label_names.len()).map_err(|_| Error::Data("too many classes".into()))?;
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(FORMAT_VERSION)?;
    w.write_u32::<LE>(count)?;
    w.write_u16::<LE>(sensors)?;
    w.write_u16::<LE>(classes)?;
    for name in &corpus.label_names {
        let len = u16::try_from(name.len()).map_err(|_| Error::Data(format!("class name too long: {name}")))?;
        w.write_u16::<LE>(len)?;
        w.write_all(name.as_bytes())?;
    }
    for win in &corpus.windows {
        w.write_u8(win.presence() | (win.split.code() << SPLIT_SHIFT))?;
        w.write_u32::<LE>(win.clip)?;
        w.write_u32::<LE>(win.subject)?;
        w.write_i32::<LE>(win.label.map_or(-1, |l| l as i32))?;
        for m in Modality::ALL {
            if let Some(p) = win.payload(m) {
                for &v in p {
                    w.write_f32::<LE>(v)?;
                }
            }
        }
    }
    Ok(())
}

pub fn corpus_read(path: impl AsRef<Path>) -> Result<Corpus> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    corpus_read_from(&bytes)
}

fn fmt_err(cur: &Cursor<&[u8]>, reason: impl Into<String>) -> Error {
    Error::Format {
        offset: cur.position(),
        reason: reason.into(),
    }
}

/// Wraps a read so truncation reports the offset where the field began.
fn field<T>(cur: &mut Cursor<&[u8]>, what: &str, f: impl FnOnce(&mut Cursor<&[u8]>) -> std::io::Result<T>) -> Result<T> {
    let start = cur.position();
    f(cur).map_err(|_| Error::Format {
        offset: start,
        reason: format!("truncated while reading {what}"),
    })
}

pub fn corpus_read_from(bytes: &[u8]) -> Result<Corpus> {
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    field(&mut cur, "magic", |c| c.read_exact(&mut magic))?;
    if &magic != MAGIC {
        cur.set_position(0);
        return Err(fmt_err(&cur, format!("bad magic {magic:?}")));
    }
    let version = field(&mut cur, "version", |c| c.read_u32::<LE>())?;
    if version != FORMAT_VERSION {
        cur.set_position(4);
        return Err(fmt_err(&cur, format!("unsupported version {version}")));
    }
    let count = field(&mut cur, "window count", |c| c.read_u32::<LE>())? as usize;
    let sensors = field(&mut cur, "sensor count", |c| c.read_u16::<LE>())? as usize;
    let classes = field(&mut cur, "class count", |c| c.read_u16::<LE>())? as usize;
    let mut label_names = Vec::with_capacity(classes);
    for _ in 0..classes {
        let len = field(&mut cur, "class name length", |c| c.read_u16::<LE>())? as usize;
        let start = cur.position();
        let mut buf = vec![0u8; len];
        field(&mut cur, "class name", |c| c.read_exact(&mut buf))?;
        let name = String::from_utf8(buf).map_err(|_| Error::Format {
            offset: start,
            reason: "class name is not UTF-8".into(),
        })?;
        label_names.push(name);
    }
    let mut corpus = Corpus::new(label_names, sensors);
    corpus.windows.reserve(count.min(1 << 20));
    for i in 0..count {
        let rec = cur.position();
        let flags = field(&mut cur, "window flags", |c| c.read_u8())?;
        let presence = flags & 0x0f;
        let split = Split::from_code(flags >> SPLIT_SHIFT).ok_or_else(|| Error::Format {
            offset: rec,
            reason: format!("window {i} has invalid split code {}", flags >> SPLIT_SHIFT),
        })?;
        if presence == 0 {
            return Err(Error::Format {
                offset: rec,
                reason: format!("window {i} carries no modality"),
            });
        }
        let clip = field(&mut cur, "clip id", |c| c.read_u32::<LE>())?;
        let subject = field(&mut cur, "subject id", |c| c.read_u32::<LE>())?;
        let lpos = cur.position();
        let label = match field(&mut cur, "label", |c| c.read_i32::<LE>())? {
            -1 => None,
            l if l >= 0 && (l as usize) < classes => Some(l as u32),
            l => {
                return Err(Error::Format {
                    offset: lpos,
                    reason: format!("label {l} out of range for {classes} classes"),
                })
            }
        };
        let mut win = MultimodalWindow {
            text: None,
            video: None,
            pose: None,
            sensor: None,
            label,
            subject,
            clip,
            split,
        };
        for m in Modality::ALL {
            if presence & m.bit() == 0 {
                continue;
            }
            let n = m.payload_len(sensors);
            let mut data = vec![0f32; n];
            field(&mut cur, &format!("{m} payload of window {i}"), |c| c.read_f32_into::<LE>(&mut data))?;
            match m {
                Modality::Text => win.text = Some(data),
                Modality::Video => win.video = Some(data),
                Modality::Pose => win.pose = Some(data),
                Modality::Sensor => win.sensor = Some(data),
            }
        }
        corpus.windows.push(win);
    }
    if (cur.position() as usize) != bytes.len() {
        return Err(fmt_err(&cur, "trailing bytes after last window"));
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_generate, SynthConfig};

    fn small() -> Corpus {
        synth_generate(&SynthConfig {
            n_classes: 3,
            clips_per_class: 5,
            frames_per_clip: 200,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut c = small();
        c.windows[0].label = None;
        c.windows[1].video = None;
        let mut buf = Vec::new();
        corpus_write_to(&c, &mut buf).unwrap();
        let back = corpus_read_from(&buf).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn empty_corpus_round_trips() {
        let c = Corpus::new(vec!["a".into(), "b".into()], 2);
        let mut buf = Vec::new();
        corpus_write_to(&c, &mut buf).unwrap();
        assert_eq!(corpus_read_from(&buf).unwrap(), c);
    }

    #[test]
    fn corrupt_magic_is_rejected_at_offset_zero() {
        let mut buf = Vec::new();
        corpus_write_to(&small(), &mut buf).unwrap();
        buf[0] = b'X';
        match corpus_read_from(&buf) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_version_and_truncation_report_offsets() {
        let mut buf = Vec::new();
        corpus_write_to(&small(), &mut buf).unwrap();
        let mut v = buf.clone();
        v[4] = 9;
        assert!(matches!(corpus_read_from(&v), Err(Error::Format { offset: 4, .. })));
        let cut = buf.len() - 10;
        match corpus_read_from(&buf[..cut]) {
            Err(Error::Format { offset, reason }) => {
                assert!(offset as usize <= cut && offset > 16, "{offset} {reason}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
