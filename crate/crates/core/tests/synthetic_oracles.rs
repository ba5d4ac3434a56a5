use std::f64::consts::PI;

use sonanza_core::synthetic::{generate_synthetic, SignalParams, SyntheticSpec};

/// Direct DFT magnitude of `x` at integer frequency bins `bins` (bin width sr / len).
fn dft_magnitudes(x: &[f32], bins: std::ops::Range<usize>) -> Vec<f64> {
    let n = x.len() as f64;
    bins.map(|k| {
        let (mut re, mut im) = (0.0, 0.0);
        for (i, &v) in x.iter().enumerate() {
            let a = -2.0 * PI * k as f64 * i as f64 / n;
            re += v as f64 * a.cos();
            im += v as f64 * a.sin();
        }
        (re * re + im * im).sqrt()
    })
    .collect()
}

fn spec() -> SyntheticSpec {
    SyntheticSpec {
        clips_per_class: 3,
        ..Default::default()
    }
}

#[test]
fn tone_clips_peak_at_their_frequency() {
    for clip in generate_synthetic(&spec()).unwrap().iter().filter(|c| c.class_id == 0) {
        let SignalParams::Tone { hz } = clip.signal else { panic!("class 0 must be a tone") };
        // One Hann-windowed second gives 1 Hz bins with fast sidelobe decay.
        let windowed: Vec<f32> = clip.audio.samples[..16_000]
            .iter()
            .enumerate()
            .map(|(i, &v)| v * (0.5 - 0.5 * (2.0 * PI * i as f64 / 16_000.0).cos()) as f32)
            .collect();
        let mags = dft_magnitudes(&windowed, 0..4000);
        let peak = mags.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert!((peak as f64 - hz).abs() <= 1.0, "peak {peak} vs {hz}");
        let runner_up = mags
            .iter()
            .enumerate()
            .filter(|(k, _)| (*k as f64 - hz).abs() > 4.0)
            .map(|(_, m)| *m)
            .fold(0.0, f64::max);
        assert!(mags[peak] > 10.0 * runner_up);
    }
}

#[test]
fn noise_clips_keep_energy_in_band() {
    for clip in generate_synthetic(&spec()).unwrap().iter().filter(|c| c.class_id == 1) {
        let SignalParams::BandNoise { low_hz, high_hz } = clip.signal else { panic!("class 1 must be noise") };
        // 1600 samples give 10 Hz bins.
        let mags = dft_magnitudes(&clip.audio.samples[..1600], 0..800);
        let (mut inside, mut total) = (0.0, 0.0);
        for (k, m) in mags.iter().enumerate() {
            let hz = k as f64 * 10.0;
            total += m * m;
            if hz >= low_hz - 100.0 && hz <= high_hz + 100.0 {
                inside += m * m;
            }
        }
        assert!(inside / total > 0.9, "in-band fraction {}", inside / total);
    }
}
