//! RIFF/WAVE decoding: 16-bit integer or 32-bit float PCM, any channel count.

use std::fs;
use std::path::Path;

use sonanza_core::dsp::AudioClip;

use crate::error::{Error, Result};
use crate::tensor_file::write_atomic;

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

struct Cursor<'a> {
    bytes: &'a [u8],
    path: &'a Path,
}

impl Cursor<'_> {
    fn fail(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            what: "WAV",
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn slice(&self, at: usize, len: usize, what: &str) -> Result<&[u8]> {
        self.bytes
            .get(at..at.checked_add(len).ok_or_else(|| self.fail(at, "length overflow"))?)
            .ok_or_else(|| self.fail(at.min(self.bytes.len()), format!("truncated {what}")))
    }

    fn u16(&self, at: usize, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.slice(at, 2, what)?.try_into().unwrap()))
    }

    fn u32(&self, at: usize, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.slice(at, 4, what)?.try_into().unwrap()))
    }
}

#[derive(Debug, Clone, Copy)]
struct Format {
    float: bool,
    channels: usize,
    sample_rate: u32,
    bits: u16,
}

/// Decodes WAV bytes; multichannel frames are averaged to mono and integer
/// samples are divided by 32768.
pub fn decode_wav(bytes: &[u8], path: &Path) -> Result<AudioClip> {
    let c = Cursor { bytes, path };
    if c.slice(0, 4, "RIFF header")? != b"RIFF" {
        return Err(c.fail(0, "missing RIFF magic"));
    }
    if c.slice(8, 4, "RIFF header")? != b"WAVE" {
        return Err(c.fail(8, "missing WAVE form type"));
    }
    let mut pos = 12;
    let mut format: Option<Format> = None;
    while pos < bytes.len() {
        let id = c.slice(pos, 4, "chunk header")?;
        let size = c.u32(pos + 4, "chunk header")? as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(c.fail(pos + 4, format!("fmt chunk of {size} bytes")));
                }
                let mut tag = c.u16(body, "fmt chunk")?;
                let channels = c.u16(body + 2, "fmt chunk")? as usize;
                let sample_rate = c.u32(body + 4, "fmt chunk")?;
                let bits = c.u16(body + 14, "fmt chunk")?;
                if tag == FORMAT_EXTENSIBLE {
                    if size < 40 {
                        return Err(c.fail(pos + 4, "extensible fmt chunk too short"));
                    }
                    tag = c.u16(body + 24, "fmt subformat")?;
                }
                let float = match (tag, bits) {
                    (FORMAT_PCM, 16) => false,
                    (FORMAT_FLOAT, 32) => true,
                    _ => {
                        return Err(c.fail(
                            body,
                            format!("unsupported encoding tag {tag} with {bits} bits per sample"),
                        ))
                    }
                };
                if channels == 0 {
                    return Err(c.fail(body + 2, "zero channels"));
                }
                if sample_rate == 0 {
                    return Err(c.fail(body + 4, "zero sample rate"));
                }
                format = Some(Format {
                    float,
                    channels,
                    sample_rate,
                    bits,
                });
            }
            b"data" => {
                let f = format.ok_or_else(|| c.fail(pos, "data chunk before fmt chunk"))?;
                let data = c.slice(body, size, "data chunk")?;
                let frame = f.channels * (f.bits as usize / 8);
                if data.len() % frame != 0 {
                    return Err(c.fail(body + data.len() - data.len() % frame, "partial sample frame"));
                }
                let samples = data
                    .chunks_exact(frame)
                    .map(|fr| {
                        let sum: f64 = if f.float {
                            fr.chunks_exact(4)
                                .map(|s| f32::from_le_bytes(s.try_into().unwrap()) as f64)
                                .sum()
                        } else {
                            fr.chunks_exact(2)
                                .map(|s| i16::from_le_bytes(s.try_into().unwrap()) as f64 / 32768.0)
                                .sum()
                        };
                        (sum / f.channels as f64) as f32
                    })
                    .collect::<Vec<f32>>();
                if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
                    return Err(c.fail(body + i * frame, "non-finite sample"));
                }
                if samples.is_empty() {
                    return Err(c.fail(body, "no samples"));
                }
                return Ok(AudioClip::new(samples, f.sample_rate));
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    Err(c.fail(bytes.len(), "no data chunk"))
}

pub fn load_wav(path: &Path) -> Result<AudioClip> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes, path)
}

/// Mono 16-bit PCM; samples are clamped to [-1, 1] and rounded.
pub fn encode_wav_i16(clip: &AudioClip) -> Vec<u8> {
    let data_len = clip.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &clip.samples {
        let v = (s.clamp(-1.0, 1.0) as f64 * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_wav_i16(path: &Path, clip: &AudioClip) -> Result<()> {
    write_atomic(path, &encode_wav_i16(clip))
}
