//! Deterministic three-class audio corpus for desk-scale end-to-end runs.
//!
//! Class 0 is a pure tone, class 1 band-limited noise, class 2 a linear chirp.
//! Every clip is [`CLIP_SAMPLES`] long at [`SAMPLE_RATE`]. Each clip draws from
//! its own stream of the spec's generator, so a clip depends only on the spec
//! and its index.

#[cfg(not(feature = "std"))]
use num_traits::Float;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{AudioClip, Fft, CLIP_SAMPLES, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::nn::seeded;

/// The number of distinct signal families the generator knows.
pub const MAX_CLASSES: usize = 3;

const NOISE_FFT: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub clips_per_class: usize,
    pub num_folds: usize,
    pub seed: u64,
    /// Tone frequency range in Hz.
    pub tone_hz: (f64, f64),
    /// Range for the lower band edge of noise clips, in Hz.
    pub noise_low_hz: (f64, f64),
    /// Range for the noise bandwidth, in Hz.
    pub noise_width_hz: (f64, f64),
    /// Chirp start and end frequency ranges, in Hz.
    pub chirp_start_hz: (f64, f64),
    pub chirp_end_hz: (f64, f64),
    /// Peak amplitude range of the foreground signal.
    pub amplitude: (f64, f64),
    /// Standard deviation of white noise added to every clip.
    pub background: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 3,
            clips_per_class: 100,
            num_folds: 5,
            seed: 7,
            tone_hz: (200.0, 2000.0),
            noise_low_hz: (2500.0, 5000.0),
            noise_width_hz: (500.0, 2500.0),
            chirp_start_hz: (200.0, 1000.0),
            chirp_end_hz: (3000.0, 7000.0),
            amplitude: (0.3, 0.8),
            background: 0.003,
        }
    }
}

/// What was drawn for one clip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SignalParams {
    Tone { hz: f64 },
    BandNoise { low_hz: f64, high_hz: f64 },
    Chirp { start_hz: f64, end_hz: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClip {
    pub clip_id: usize,
    pub class_id: usize,
    /// 1-based fold.
    pub fold: usize,
    pub signal: SignalParams,
    pub audio: AudioClip,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > MAX_CLASSES {
            return Err(Error::Config(format!(
                "num_classes must be in 1..={MAX_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.num_folds == 0 {
            return Err(Error::Config("num_folds must be positive".into()));
        }
        let nyquist = SAMPLE_RATE as f64 / 2.0;
        for (name, (lo, hi)) in [
            ("tone_hz", self.tone_hz),
            ("noise_low_hz", self.noise_low_hz),
            ("noise_width_hz", self.noise_width_hz),
            ("chirp_start_hz", self.chirp_start_hz),
            ("chirp_end_hz", self.chirp_end_hz),
        ] {
            if !(lo > 0.0 && lo <= hi && hi < nyquist) {
                return Err(Error::Config(format!("{name} range ({lo}, {hi}) is invalid")));
            }
        }
        if self.noise_low_hz.1 + self.noise_width_hz.1 >= nyquist {
            return Err(Error::Config("noise band can exceed Nyquist".into()));
        }
        let (a_lo, a_hi) = self.amplitude;
        if !(a_lo > 0.0 && a_lo <= a_hi && a_hi + 4.0 * self.background <= 1.0) {
            return Err(Error::Config(format!("amplitude range ({a_lo}, {a_hi}) is invalid")));
        }
        if !(self.background >= 0.0 && self.background.is_finite()) {
            return Err(Error::Config("background must be non-negative".into()));
        }
        Ok(())
    }

    pub fn num_clips(&self) -> usize {
        self.num_classes * self.clips_per_class
    }
}

/// Clips are interleaved by class (`clip_id = j * num_classes + class`) and the
/// `j`-th clip of every class lands in fold `j % num_folds + 1`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<SyntheticClip>> {
    spec.validate()?;
    let fft = Fft::new(NOISE_FFT)?;
    let mut out = Vec::with_capacity(spec.num_clips());
    for j in 0..spec.clips_per_class {
        for class_id in 0..spec.num_classes {
            let clip_id = j * spec.num_classes + class_id;
            out.push(generate_clip(spec, &fft, clip_id, class_id, j % spec.num_folds + 1));
        }
    }
    Ok(out)
}

fn draw(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn generate_clip(spec: &SyntheticSpec, fft: &Fft, clip_id: usize, class_id: usize, fold: usize) -> SyntheticClip {
    let mut rng = seeded(spec.seed);
    rng.set_stream(clip_id as u64);
    let sr = SAMPLE_RATE as f64;
    let amplitude = draw(&mut rng, spec.amplitude);
    let (signal, mut wave) = match class_id {
        0 => {
            let hz = draw(&mut rng, spec.tone_hz);
            let phase = rng.random_range(0.0..2.0 * PI);
            let wave: Vec<f64> = (0..CLIP_SAMPLES)
                .map(|n| (2.0 * PI * hz * n as f64 / sr + phase).sin())
                .collect();
            (SignalParams::Tone { hz }, wave)
        }
        1 => {
            let low_hz = draw(&mut rng, spec.noise_low_hz);
            let high_hz = low_hz + draw(&mut rng, spec.noise_width_hz);
            (SignalParams::BandNoise { low_hz, high_hz }, band_noise(fft, &mut rng, low_hz, high_hz))
        }
        _ => {
            let start_hz = draw(&mut rng, spec.chirp_start_hz);
            let end_hz = draw(&mut rng, spec.chirp_end_hz);
            let duration = CLIP_SAMPLES as f64 / sr;
            let slope = (end_hz - start_hz) / duration;
            let phase = rng.random_range(0.0..2.0 * PI);
            let wave: Vec<f64> = (0..CLIP_SAMPLES)
                .map(|n| {
                    let t = n as f64 / sr;
                    (2.0 * PI * (start_hz * t + 0.5 * slope * t * t) + phase).sin()
                })
                .collect();
            (SignalParams::Chirp { start_hz, end_hz }, wave)
        }
    };
    let peak = wave.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    wave.iter_mut().for_each(|v| *v *= amplitude / peak);
    if spec.background > 0.0 {
        for v in wave.iter_mut() {
            *v += spec.background * standard_normal(&mut rng);
        }
    }
    let samples = wave.into_iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect();
    SyntheticClip {
        clip_id,
        class_id,
        fold,
        signal,
        audio: AudioClip::new(samples, SAMPLE_RATE),
    }
}

/// Noise with a flat random-phase, Gaussian-amplitude spectrum inside
/// `[low_hz, high_hz]` and nothing outside it.
fn band_noise(fft: &Fft, rng: &mut impl Rng, low_hz: f64, high_hz: f64) -> Vec<f64> {
    let n = fft.len();
    let bin_hz = SAMPLE_RATE as f64 / n as f64;
    let lo = (low_hz / bin_hz).ceil() as usize;
    let hi = ((high_hz / bin_hz).floor() as usize).min(n / 2 - 1);
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    for k in lo..=hi {
        let (a, b) = (standard_normal(rng), standard_normal(rng));
        re[k] = a;
        im[k] = b;
        re[n - k] = a;
        im[n - k] = -b;
    }
    fft.inverse(&mut re, &mut im);
    re.truncate(CLIP_SAMPLES);
    re
}

/// Box-Muller; one draw per call keeps the stream layout simple.
fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}
