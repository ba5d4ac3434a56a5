use std::f64::consts::PI;

use sonanza_core::dsp::{
    downsample_spec, fix_duration, logmel, resample, AudioClip, LogMel, CLIP_SAMPLES, HOP,
    N_FFT, SAMPLE_RATE, WINDOW,
};

fn tone(freq: f64, amp: f64, rate: u32, len: usize) -> AudioClip {
    AudioClip::new(
        (0..len)
            .map(|n| (amp * (2.0 * PI * freq * n as f64 / rate as f64).sin()) as f32)
            .collect(),
        rate,
    )
}

/// Frequency (Hz) of the largest direct-DFT magnitude bin of `x`.
fn dft_peak_hz(x: &[f32], rate: u32) -> (f64, f64) {
    let n = x.len();
    let mut best = (0, 0.0);
    for k in 1..n / 2 {
        let (mut re, mut im) = (0.0, 0.0);
        for (j, &v) in x.iter().enumerate() {
            let a = -2.0 * PI * (k * j % n) as f64 / n as f64;
            re += v as f64 * a.cos();
            im += v as f64 * a.sin();
        }
        let mag = re * re + im * im;
        if mag > best.1 {
            best = (k, mag);
        }
    }
    (best.0 as f64 * rate as f64 / n as f64, rate as f64 / n as f64)
}

#[test]
fn resampled_tone_keeps_its_frequency() {
    let src = tone(1000.0, 0.5, 44100, 44100 / 2);
    let out = resample(&src, SAMPLE_RATE).unwrap();
    assert_eq!(out.sample_rate, SAMPLE_RATE);
    assert_eq!(out.samples.len(), 8000);
    let (peak, bin) = dft_peak_hz(&out.samples[..4000], SAMPLE_RATE);
    assert!((peak - 1000.0).abs() <= bin, "peak at {peak} Hz (bin width {bin})");
    // Amplitude survives the band-limited kernel away from the edges.
    let max = out.samples[500..7500].iter().fold(0.0f32, |m, v| m.max(v.abs()));
    assert!((max - 0.5).abs() < 0.02, "{max}");
}

#[test]
fn tone_peaks_in_the_filterbank_bin_for_its_frequency() {
    let analysis = LogMel::new();
    let clip = tone(440.0, 0.5, SAMPLE_RATE, CLIP_SAMPLES);
    let mel = analysis.compute(&clip).unwrap();
    assert_eq!(mel.shape(), (128, 400));

    // Oracle: direct DFT of one interior frame, then the filterbank.
    let centre = 200 * HOP;
    let window: Vec<f64> = (0..WINDOW)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / WINDOW as f64).cos())
        .collect();
    let frame: Vec<f64> = (0..WINDOW)
        .map(|j| clip.samples[centre - WINDOW / 2 + j] as f64 * window[j])
        .collect();
    let power: Vec<f64> = (0..N_FFT / 2 + 1)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (j, &v) in frame.iter().enumerate() {
                let a = -2.0 * PI * (k * j) as f64 / N_FFT as f64;
                re += v * a.cos();
                im += v * a.sin();
            }
            re * re + im * im
        })
        .collect();
    let bank = analysis.filterbank();
    let oracle_mel: Vec<f64> = (0..128)
        .map(|m| bank.row(m).iter().zip(&power).map(|(w, p)| w * p).sum())
        .collect();
    let oracle_bin = (0..128)
        .max_by(|&a, &b| oracle_mel[a].partial_cmp(&oracle_mel[b]).unwrap())
        .unwrap();
    assert_eq!(oracle_bin, bank.bin_for_hz(440.0));
    for m in 0..128 {
        let got = mel.get(m, 200) as f64;
        let want = (oracle_mel[m] + 1e-10).ln();
        assert!((got - want).abs() < 1e-3 * want.abs().max(1.0), "bin {m}: {got} vs {want}");
    }
    for t in 0..400 {
        let argmax = (0..128)
            .max_by(|&a, &b| mel.get(a, t).partial_cmp(&mel.get(b, t)).unwrap())
            .unwrap();
        assert_eq!(argmax, oracle_bin, "frame {t}");
    }
}

#[test]
fn gain_shifts_log_mel_by_twice_log_gain() {
    let analysis = LogMel::new();
    let clip = tone(1234.0, 0.2, SAMPLE_RATE, CLIP_SAMPLES);
    let g = 3.0f64;
    let louder = AudioClip::new(clip.samples.iter().map(|&v| (v as f64 * g) as f32).collect(), SAMPLE_RATE);
    let a = analysis.compute(&clip).unwrap();
    let b = analysis.compute(&louder).unwrap();
    let mut checked = 0;
    for (x, y) in a.data().iter().zip(b.data()) {
        if *x > -5.0 {
            assert!((((y - x) as f64) - 2.0 * g.ln()).abs() < 1e-3, "{x} {y}");
            checked += 1;
        }
    }
    assert!(checked > 400);
}

#[test]
fn shape_chain_and_determinism() {
    let clip = tone(700.0, 0.3, 22050, 22050);
    let clip = resample(&clip, SAMPLE_RATE).unwrap();
    let clip = fix_duration(&clip, CLIP_SAMPLES).unwrap();
    assert_eq!(clip.samples.len(), 64000);
    let mel = logmel(&clip).unwrap();
    let again = logmel(&clip).unwrap();
    assert!(mel.data().iter().zip(again.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(mel.shape(), (128, 400));
    let floor = (1e-10f64).ln() as f32;
    assert!(mel.data().iter().all(|&v| v >= floor));
    assert_eq!(downsample_spec(&mel, 2).unwrap().shape(), (64, 200));
}
