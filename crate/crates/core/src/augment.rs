//! Spectral augmentations for contrastive views.
//!
//! Every kind maps a log-mel matrix to one of the same shape. Masking kinds
//! write the spectrogram's floor value `ln(log_floor)` rather than zero, so masked
//! bins read as silence in the log domain. Each view gets exactly one kind; the
//! sampled parameter ranges stand in for distortion levels.

#[cfg(not(feature = "std"))]
use num_traits::Float;
use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::nn::seeded;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AugmentationKind {
    Checkerboard,
    TimeReverse,
    FreqFlip,
    AmplitudeScale,
    BandStop,
    SpectralPeaks,
    EnergyThreshold,
    AddNoise,
    SpectralEnvelope,
}

impl AugmentationKind {
    pub const ALL: [AugmentationKind; 9] = [
        Self::Checkerboard,
        Self::TimeReverse,
        Self::FreqFlip,
        Self::AmplitudeScale,
        Self::BandStop,
        Self::SpectralPeaks,
        Self::EnergyThreshold,
        Self::AddNoise,
        Self::SpectralEnvelope,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Checkerboard => "checkerboard",
            Self::TimeReverse => "time-reverse",
            Self::FreqFlip => "freq-flip",
            Self::AmplitudeScale => "amplitude-scale",
            Self::BandStop => "band-stop",
            Self::SpectralPeaks => "spectral-peaks",
            Self::EnergyThreshold => "energy-threshold",
            Self::AddNoise => "add-noise",
            Self::SpectralEnvelope => "spectral-envelope",
        }
    }

    /// Kinds that only ever lower entries to the floor.
    pub fn is_mask(self) -> bool {
        matches!(
            self,
            Self::Checkerboard | Self::BandStop | Self::SpectralPeaks | Self::EnergyThreshold
        )
    }
}

impl fmt::Display for AugmentationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugmentationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown augmentation kind {s:?}")))
    }
}

/// Parameters for every kind; each kind reads only its own fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationParams {
    /// Checkerboard period, one of 2, 3, 4.
    pub checkerboard_spacing: usize,
    /// Gain in dB, within [-10, 10].
    pub scale_db: f64,
    pub bandstop_onset: usize,
    pub bandstop_width: usize,
    /// Standard deviation of additive log-domain noise.
    pub noise_sigma: f64,
    /// Quantile below which energy-threshold floors entries, within [0, 1].
    pub energy_percentile: f64,
    /// Half-width (in mel bins) of the peak-picking and envelope windows.
    pub peak_neighborhood: usize,
    /// Drives the checkerboard phase and the noise draw.
    pub seed: u64,
}

pub const SPACINGS: [usize; 3] = [2, 3, 4];
pub const SCALE_DB_RANGE: (f64, f64) = (-10.0, 10.0);
pub const NOISE_SIGMA_RANGE: (f64, f64) = (0.1, 1.0);
pub const PERCENTILE_RANGE: (f64, f64) = (0.5, 0.9);
pub const BANDSTOP_WIDTH_RANGE: (usize, usize) = (4, 16);
pub const NEIGHBORHOOD_RANGE: (usize, usize) = (1, 4);

impl Default for AugmentationParams {
    fn default() -> Self {
        Self {
            checkerboard_spacing: 2,
            scale_db: 0.0,
            bandstop_onset: 0,
            bandstop_width: 4,
            noise_sigma: 0.1,
            energy_percentile: 0.5,
            peak_neighborhood: 1,
            seed: 0,
        }
    }
}

impl AugmentationParams {
    /// Draws every field from its declared range.
    pub fn sample(rng: &mut impl Rng, n_mels: usize) -> Self {
        Self {
            checkerboard_spacing: SPACINGS[rng.random_range(0..SPACINGS.len())],
            scale_db: rng.random_range(SCALE_DB_RANGE.0..=SCALE_DB_RANGE.1),
            bandstop_onset: rng.random_range(0..n_mels.max(1)),
            bandstop_width: rng.random_range(BANDSTOP_WIDTH_RANGE.0..=BANDSTOP_WIDTH_RANGE.1),
            noise_sigma: rng.random_range(NOISE_SIGMA_RANGE.0..=NOISE_SIGMA_RANGE.1),
            energy_percentile: rng.random_range(PERCENTILE_RANGE.0..=PERCENTILE_RANGE.1),
            peak_neighborhood: rng.random_range(NEIGHBORHOOD_RANGE.0..=NEIGHBORHOOD_RANGE.1),
            seed: rng.random(),
        }
    }

    pub fn validate(&self, kind: AugmentationKind, n_mels: usize) -> Result<()> {
        let bad = |what: &str| Err(Error::Parameter(format!("{kind}: {what} out of range ({self:?})")));
        match kind {
            AugmentationKind::Checkerboard if !SPACINGS.contains(&self.checkerboard_spacing) => {
                bad("checkerboard_spacing")
            }
            AugmentationKind::AmplitudeScale
                if !(self.scale_db >= SCALE_DB_RANGE.0 && self.scale_db <= SCALE_DB_RANGE.1) =>
            {
                bad("scale_db")
            }
            AugmentationKind::BandStop if self.bandstop_onset >= n_mels || self.bandstop_width == 0 => {
                bad("bandstop onset/width")
            }
            AugmentationKind::AddNoise if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) => {
                bad("noise_sigma")
            }
            AugmentationKind::EnergyThreshold
                if !(self.energy_percentile >= 0.0 && self.energy_percentile <= 1.0) =>
            {
                bad("energy_percentile")
            }
            AugmentationKind::SpectralPeaks | AugmentationKind::SpectralEnvelope
                if self.peak_neighborhood == 0 =>
            {
                bad("peak_neighborhood")
            }
            _ => Ok(()),
        }
    }
}

/// Applies one augmentation to a copy of `mel`.
pub fn apply(kind: AugmentationKind, params: &AugmentationParams, mel: &MelSpectrogram) -> Result<MelSpectrogram> {
    let (n_mels, n_frames) = mel.shape();
    params.validate(kind, n_mels)?;
    let floor = mel.floor_value();
    let src = mel.data();
    let mut out = src.to_vec();
    let at = |f: usize, t: usize| f * n_frames + t;
    match kind {
        AugmentationKind::Checkerboard => {
            let spacing = params.checkerboard_spacing;
            let phase = seeded(params.seed).random_range(0..spacing);
            for f in 0..n_mels {
                for t in 0..n_frames {
                    if (t + f) % spacing == phase {
                        out[at(f, t)] = floor;
                    }
                }
            }
        }
        AugmentationKind::TimeReverse => {
            for row in out.chunks_mut(n_frames) {
                row.reverse();
            }
        }
        AugmentationKind::FreqFlip => {
            for f in 0..n_mels {
                out[at(f, 0)..at(f, 0) + n_frames].copy_from_slice(&src[at(n_mels - 1 - f, 0)..][..n_frames]);
            }
        }
        AugmentationKind::AmplitudeScale => {
            // Gain applied to power, expressed in the natural-log domain.
            let shift = (params.scale_db / 10.0 * core::f64::consts::LN_10) as f32;
            out.iter_mut().for_each(|v| *v += shift);
        }
        AugmentationKind::BandStop => {
            let end = (params.bandstop_onset + params.bandstop_width).min(n_mels);
            out[at(params.bandstop_onset, 0)..at(end, 0)].iter_mut().for_each(|v| *v = floor);
        }
        AugmentationKind::SpectralPeaks => {
            let n = params.peak_neighborhood;
            for t in 0..n_frames {
                for f in 0..n_mels {
                    let v = src[at(f, t)];
                    let lo = f.saturating_sub(n);
                    let hi = (f + n).min(n_mels - 1);
                    let is_peak = (lo..=hi).all(|g| g == f || src[at(g, t)] < v);
                    if !is_peak {
                        out[at(f, t)] = floor;
                    }
                }
            }
        }
        AugmentationKind::EnergyThreshold => {
            let threshold = quantile(src, params.energy_percentile);
            out.iter_mut().filter(|v| **v < threshold).for_each(|v| *v = floor);
        }
        AugmentationKind::AddNoise => {
            let mut rng = seeded(params.seed);
            let normal = Normal::new(0.0f64, params.noise_sigma)
                .map_err(|e| Error::Parameter(format!("noise: {e}")))?;
            out.iter_mut().for_each(|v| *v += normal.sample(&mut rng) as f32);
        }
        AugmentationKind::SpectralEnvelope => {
            // Centred moving average of width 2n+1 over mel bins, truncated at edges.
            let n = params.peak_neighborhood;
            for t in 0..n_frames {
                for f in 0..n_mels {
                    let lo = f.saturating_sub(n);
                    let hi = (f + n).min(n_mels - 1);
                    let sum: f64 = (lo..=hi).map(|g| src[at(g, t)] as f64).sum();
                    out[at(f, t)] = (sum / (hi - lo + 1) as f64) as f32;
                }
            }
        }
    }
    MelSpectrogram::new(Tensor::new(&[n_mels, n_frames], out)?, mel.log_floor)
}

/// Lower empirical quantile: the element at rank `floor(p * (n - 1))`.
fn quantile(values: &[f32], p: f64) -> f32 {
    let mut sorted: Vec<f32> = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = (p * (sorted.len() - 1) as f64).floor() as usize;
    sorted[rank.min(sorted.len() - 1)]
}

/// Two augmented views of one spectrogram.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub view_i: MelSpectrogram,
    pub view_j: MelSpectrogram,
    pub source_id: usize,
    pub kinds: (AugmentationKind, AugmentationKind),
}

/// Draws two kinds independently and uniformly (they may coincide), samples
/// parameters for each, and applies them to fresh copies of `mel`.
pub fn sample_pair(mel: &MelSpectrogram, source_id: usize, seed: u64) -> Result<AugmentedPair> {
    let mut rng = seeded(seed);
    let ki = AugmentationKind::ALL[rng.random_range(0..9)];
    let kj = AugmentationKind::ALL[rng.random_range(0..9)];
    let pi = AugmentationParams::sample(&mut rng, mel.n_mels());
    let pj = AugmentationParams::sample(&mut rng, mel.n_mels());
    Ok(AugmentedPair {
        view_i: apply(ki, &pi, mel)?,
        view_j: apply(kj, &pj, mel)?,
        source_id,
        kinds: (ki, kj),
    })
}

/// Like [`sample_pair`] with the kinds fixed by the caller.
pub fn pair_with_kinds(
    mel: &MelSpectrogram,
    source_id: usize,
    kinds: (AugmentationKind, AugmentationKind),
    seed: u64,
) -> Result<AugmentedPair> {
    let mut rng = seeded(seed);
    let pi = AugmentationParams::sample(&mut rng, mel.n_mels());
    let pj = AugmentationParams::sample(&mut rng, mel.n_mels());
    Ok(AugmentedPair {
        view_i: apply(kinds.0, &pi, mel)?,
        view_j: apply(kinds.1, &pj, mel)?,
        source_id,
        kinds,
    })
}
