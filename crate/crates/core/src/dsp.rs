//! Waveform to log-mel front end.
//!
//! Clips are brought to 16 kHz, tiled or cut to exactly 4 s, and analysed with a
//! 30 ms periodic Hann window (480 samples), 10 ms hop (160 samples) and a
//! 1024-point FFT. Frames are centred on `t * hop` with 240 samples of padding
//! on each side taken circularly from the other end of the clip (clips are
//! loops after tiling), giving exactly `len / hop = 400` frames. The power spectrum
//! `|X|^2` is projected onto 128 Slaney-style mel filters spanning 0 Hz to Nyquist
//! and stored as `ln(mel_power + 1e-10)`. The "log magnitude" naming is kept for
//! this power-domain representation.

#[cfg(not(feature = "std"))]
use num_traits::Float;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const CLIP_SECONDS: usize = 4;
pub const CLIP_SAMPLES: usize = CLIP_SECONDS * SAMPLE_RATE as usize;
pub const HOP: usize = 160;
pub const WINDOW: usize = 480;
pub const N_FFT: usize = 1024;
pub const N_MELS: usize = 128;
pub const N_FRAMES: usize = CLIP_SAMPLES / HOP;
pub const LOG_FLOOR: f64 = 1e-10;
/// Shape after 2x down-sampling: 64 mel bins by 200 frames.
pub const DOWN_MELS: usize = N_MELS / 2;
pub const DOWN_FRAMES: usize = N_FRAMES / 2;

/// Zero crossings of the resampling kernel on each side of its centre.
pub const RESAMPLE_ZERO_CROSSINGS: usize = 16;
/// Fraction of the lower Nyquist frequency kept by the anti-aliasing filter.
pub const RESAMPLE_ROLLOFF: f64 = 0.95;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Band-limited resampling with a Hann-windowed sinc kernel of
/// [`RESAMPLE_ZERO_CROSSINGS`] zero crossings per side. The output has
/// `round(len * target / source)` samples.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if clip.sample_rate == 0 || target_rate == 0 {
        return Err(Error::Input(format!(
            "invalid sample rates {} -> {target_rate}",
            clip.sample_rate
        )));
    }
    if clip.sample_rate == target_rate {
        return Ok(clip.clone());
    }
    let ratio = target_rate as f64 / clip.sample_rate as f64;
    let out_len = (clip.samples.len() as f64 * ratio).round() as usize;
    // Cutoff in cycles per input sample.
    let cutoff = 0.5 * ratio.min(1.0) * RESAMPLE_ROLLOFF;
    let half_width = RESAMPLE_ZERO_CROSSINGS as f64 / (2.0 * cutoff);
    let n_in = clip.samples.len() as isize;
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let centre = n as f64 / ratio;
        let lo = (centre - half_width).ceil().max(0.0) as isize;
        let hi = ((centre + half_width).floor() as isize).min(n_in - 1);
        let mut acc = 0.0;
        for i in lo..=hi {
            let t = centre - i as f64;
            let window = 0.5 + 0.5 * (PI * t / half_width).cos();
            let arg = 2.0 * cutoff * t;
            let sinc = if arg.abs() < 1e-12 { 1.0 } else { (PI * arg).sin() / (PI * arg) };
            acc += clip.samples[i as usize] as f64 * 2.0 * cutoff * sinc * window;
        }
        out.push(acc as f32);
    }
    Ok(AudioClip::new(out, target_rate))
}

/// Tiles short clips end-to-end (truncating the last copy) and cuts long clips,
/// yielding exactly `target_samples` samples.
pub fn fix_duration(clip: &AudioClip, target_samples: usize) -> Result<AudioClip> {
    if clip.samples.is_empty() {
        return Err(Error::Input("cannot fix the duration of an empty clip".into()));
    }
    let samples = clip.samples.iter().copied().cycle().take(target_samples).collect();
    Ok(AudioClip::new(samples, clip.sample_rate))
}

/// In-place radix-2 complex FFT.
#[derive(Debug, Clone)]
pub struct Fft {
    n: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Fft {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::Parameter(format!("FFT size {n} is not a power of two")));
        }
        let (cos, sin) = (0..n / 2)
            .map(|k| {
                let a = -2.0 * PI * k as f64 / n as f64;
                (a.cos(), a.sin())
            })
            .unzip();
        Ok(Self { n, cos, sin })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Forward transform, `X[k] = sum_n x[n] e^{-2 pi i k n / N}`.
    pub fn forward(&self, re: &mut [f64], im: &mut [f64]) {
        self.transform(re, im, false);
    }

    /// Inverse transform including the `1/N` factor.
    pub fn inverse(&self, re: &mut [f64], im: &mut [f64]) {
        self.transform(re, im, true);
        let s = 1.0 / self.n as f64;
        re.iter_mut().chain(im.iter_mut()).for_each(|v| *v *= s);
    }

    fn transform(&self, re: &mut [f64], im: &mut [f64], inverse: bool) {
        let n = self.n;
        assert!(re.len() == n && im.len() == n);
        let bits = n.trailing_zeros();
        for i in 0..n {
            let j = if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) };
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let step = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..len / 2 {
                    let (wr, mut wi) = (self.cos[k * step], self.sin[k * step]);
                    if inverse {
                        wi = -wi;
                    }
                    let (a, b) = (start + k, start + k + len / 2);
                    let tr = re[b] * wr - im[b] * wi;
                    let ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            len *= 2;
        }
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    // Slaney: linear below 1 kHz, logarithmic above.
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= MIN_LOG_HZ {
        min_log_mel + (hz / MIN_LOG_HZ).ln() / logstep
    } else {
        hz / F_SP
    }
}

fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        MIN_LOG_HZ * (logstep * (mel - min_log_mel)).exp()
    } else {
        mel * F_SP
    }
}

/// Triangular mel filters with area (Slaney) normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    /// `[n_mels, n_fft / 2 + 1]`, row-major.
    pub weights: Vec<f64>,
    pub n_mels: usize,
    pub n_bins: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub sample_rate: u32,
}

impl MelFilterbank {
    pub fn new(sample_rate: u32, n_fft: usize, n_mels: usize, fmin: f64, fmax: f64) -> Result<Self> {
        if !(fmin >= 0.0 && fmax > fmin && fmax <= sample_rate as f64 / 2.0) || n_mels == 0 {
            return Err(Error::Parameter(format!(
                "invalid filterbank range {fmin}..{fmax} Hz for {n_mels} mels"
            )));
        }
        let n_bins = n_fft / 2 + 1;
        let (mlo, mhi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (lo, centre, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let norm = 2.0 / (hi - lo);
            for k in 0..n_bins {
                let f = k as f64 * sample_rate as f64 / n_fft as f64;
                let rise = (f - lo) / (centre - lo);
                let fall = (hi - f) / (hi - centre);
                weights[m * n_bins + k] = rise.min(fall).max(0.0) * norm;
            }
        }
        Ok(Self {
            weights,
            n_mels,
            n_bins,
            fmin,
            fmax,
            sample_rate,
        })
    }

    /// The bank used by [`logmel`]: 128 filters over 0..8 kHz for a 1024-point FFT.
    pub fn standard() -> Self {
        Self::new(SAMPLE_RATE, N_FFT, N_MELS, 0.0, SAMPLE_RATE as f64 / 2.0)
            .expect("standard filterbank parameters are valid")
    }

    pub fn row(&self, mel: usize) -> &[f64] {
        &self.weights[mel * self.n_bins..(mel + 1) * self.n_bins]
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate().take(self.n_mels) {
            *o = self.row(m).iter().zip(power).map(|(w, p)| w * p).sum();
        }
    }

    /// Mel bin with the largest weight for the FFT bin nearest `hz`.
    pub fn bin_for_hz(&self, hz: f64) -> usize {
        let n_fft = (self.n_bins - 1) * 2;
        let k = (hz * n_fft as f64 / self.sample_rate as f64).round() as usize;
        (0..self.n_mels)
            .max_by(|&a, &b| {
                self.weights[a * self.n_bins + k]
                    .partial_cmp(&self.weights[b * self.n_bins + k])
                    .unwrap()
            })
            .unwrap()
    }
}

/// Log-mel time-frequency matrix `[n_mels, n_frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Tensor<f32>,
    /// Additive floor inside the logarithm; every entry is `>= ln(log_floor)`.
    pub log_floor: f64,
}

impl MelSpectrogram {
    pub fn new(values: Tensor<f32>, log_floor: f64) -> Result<Self> {
        values.dims2()?;
        Ok(Self { values, log_floor })
    }

    /// A spectrogram filled with one value.
    pub fn constant(n_mels: usize, n_frames: usize, value: f32) -> Self {
        Self {
            values: Tensor::full(&[n_mels, n_frames], value),
            log_floor: LOG_FLOOR,
        }
    }

    pub fn n_mels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_frames(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_mels(), self.n_frames())
    }

    /// The value masked entries are set to, `ln(log_floor)`.
    pub fn floor_value(&self) -> f32 {
        self.log_floor.ln() as f32
    }

    pub fn get(&self, mel: usize, frame: usize) -> f32 {
        self.values.data()[mel * self.n_frames() + frame]
    }

    pub fn data(&self) -> &[f32] {
        self.values.data()
    }
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Reusable analysis state for [`logmel`].
#[derive(Debug, Clone)]
pub struct LogMel {
    fft: Fft,
    window: Vec<f64>,
    bank: MelFilterbank,
}

impl Default for LogMel {
    fn default() -> Self {
        Self::new()
    }
}

impl LogMel {
    pub fn new() -> Self {
        Self {
            fft: Fft::new(N_FFT).expect("power of two"),
            window: hann(WINDOW),
            bank: MelFilterbank::standard(),
        }
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    /// Power spectrum (`N_FFT / 2 + 1` bins) of the frame centred on `centre`.
    pub fn frame_power(&self, samples: &[f32], centre: usize) -> Vec<f64> {
        let mut re = vec![0.0; N_FFT];
        let mut im = vec![0.0; N_FFT];
        let start = centre as isize - (WINDOW / 2) as isize;
        for (j, w) in self.window.iter().enumerate() {
            re[j] = samples[(start + j as isize).rem_euclid(samples.len() as isize) as usize] as f64 * w;
        }
        self.fft.forward(&mut re, &mut im);
        (0..N_FFT / 2 + 1).map(|k| re[k] * re[k] + im[k] * im[k]).collect()
    }

    pub fn compute(&self, clip: &AudioClip) -> Result<MelSpectrogram> {
        if clip.sample_rate != SAMPLE_RATE || clip.samples.len() != CLIP_SAMPLES {
            return Err(Error::Input(format!(
                "log-mel expects {CLIP_SAMPLES} samples at {SAMPLE_RATE} Hz, got {} at {} Hz",
                clip.samples.len(),
                clip.sample_rate
            )));
        }
        let mut out = vec![0.0f32; N_MELS * N_FRAMES];
        let mut mel = vec![0.0; N_MELS];
        for t in 0..N_FRAMES {
            let power = self.frame_power(&clip.samples, t * HOP);
            self.bank.apply(&power, &mut mel);
            for (m, v) in mel.iter().enumerate() {
                out[m * N_FRAMES + t] = (v + LOG_FLOOR).ln() as f32;
            }
        }
        MelSpectrogram::new(Tensor::new(&[N_MELS, N_FRAMES], out)?, LOG_FLOOR)
    }
}

/// 128x400 log-mel spectrogram of a 4 s, 16 kHz clip.
pub fn logmel(clip: &AudioClip) -> Result<MelSpectrogram> {
    LogMel::new().compute(clip)
}

/// Mean pooling over `factor x factor` blocks.
pub fn downsample_spec(mel: &MelSpectrogram, factor: usize) -> Result<MelSpectrogram> {
    let (m, t) = mel.shape();
    if factor == 0 || m % factor != 0 || t % factor != 0 {
        return Err(Error::dim("downsample_spec", &[m, t], &[factor, factor]));
    }
    let (om, ot) = (m / factor, t / factor);
    let scale = 1.0 / (factor * factor) as f64;
    let src = mel.data();
    let mut out = vec![0.0f32; om * ot];
    for i in 0..om {
        for j in 0..ot {
            let mut acc = 0.0f64;
            for di in 0..factor {
                for dj in 0..factor {
                    acc += src[(i * factor + di) * t + j * factor + dj] as f64;
                }
            }
            out[i * ot + j] = (acc * scale) as f32;
        }
    }
    MelSpectrogram::new(Tensor::new(&[om, ot], out)?, mel.log_floor)
}

/// Full front end: resample to 16 kHz, fix to 4 s, log-mel, 2x down-sampling.
pub fn preprocess(clip: &AudioClip, analysis: &LogMel) -> Result<MelSpectrogram> {
    let clip = resample(clip, SAMPLE_RATE)?;
    let clip = fix_duration(&clip, CLIP_SAMPLES)?;
    let native = analysis.compute(&clip)?;
    downsample_spec(&native, 2)
}
