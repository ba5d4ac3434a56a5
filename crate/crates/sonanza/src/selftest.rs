//! In-process oracle checks behind `sonanza selftest`. The full suites live in
//! the test targets; this is the quick smoke run shipped with the binary.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use sonanza_core::augment::{apply, AugmentationKind, AugmentationParams};
use sonanza_core::codebook::{extract_patches, kmeans_fit, PATCHES_PER_CLIP};
use sonanza_core::contrastive::{contrastive_loss, nt_xent_loss, similarity_matrix};
use sonanza_core::dsp::{preprocess, AudioClip, LogMel, MelSpectrogram, DOWN_FRAMES, DOWN_MELS};
use sonanza_core::generative::{CodePredictor, TransformerConfig};
use sonanza_core::nn::seeded;
use sonanza_core::tensor::{grad_check, softmax_cross_entropy, Tensor, DEFAULT_EPS};

use crate::tensor_file::{decode, encode, TensorData};
use crate::wav::{decode_wav, encode_wav_i16};

type Check = fn() -> Result<(), String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = seeded(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct evaluation of the pairwise NT-Xent definition.
fn nt_xent_direct(z: &Tensor<f64>, tau: f64) -> f64 {
    let (m, d) = z.dims2().unwrap();
    let unit: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let r = &z.data()[i * d..(i + 1) * d];
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    let s = |i: usize, j: usize| unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum::<f64>();
    let l = |i: usize, j: usize| {
        let den: f64 = (0..m).filter(|&k| k != i).map(|k| (s(i, k) / tau).exp()).sum();
        -((s(i, j) / tau).exp() / den).ln()
    };
    (0..m / 2).map(|k| l(2 * k, 2 * k + 1) + l(2 * k + 1, 2 * k)).sum::<f64>() / m as f64
}

fn check_cross_entropy() -> Result<(), String> {
    let logits = Tensor::new(&[1, 3], vec![1.0f64, 2.0, 3.0]).unwrap();
    let l = softmax_cross_entropy(&logits, &[0]).map_err(|e| e.to_string())?;
    ensure((l - 2.4076).abs() < 1e-4, || format!("loss {l}"))
}

fn check_nt_xent() -> Result<(), String> {
    for (seed, n) in [(1u64, 1usize), (2, 2), (3, 4), (4, 8)] {
        let z = random(&[2 * n, 6], seed);
        let s = similarity_matrix(&z).map_err(|e| e.to_string())?;
        let got = nt_xent_loss(&s, 0.5).map_err(|e| e.to_string())?;
        let want = if n == 1 { 0.0 } else { nt_xent_direct(&z, 0.5) };
        ensure((got - want).abs() <= 1e-5 * want.abs().max(1e-12) || got == want, || {
            format!("N={n}: {got} vs {want}")
        })?;
    }
    Ok(())
}

fn check_nt_xent_gradient() -> Result<(), String> {
    let z = random(&[8, 5], 11);
    let r = grad_check(|g, x| contrastive_loss(g, x, 0.5), &z, DEFAULT_EPS).map_err(|e| e.to_string())?;
    ensure(r.max_rel_error < 1e-5, || format!("relative error {}", r.max_rel_error))
}

fn check_augment_involutions() -> Result<(), String> {
    let mut rng = seeded(5);
    let values = Tensor::from_fn(&[DOWN_MELS, DOWN_FRAMES], |_| rng.random_range(-20.0f32..5.0));
    let mel = MelSpectrogram::new(values, sonanza_core::dsp::LOG_FLOOR).map_err(|e| e.to_string())?;
    let p = AugmentationParams::default();
    for kind in [AugmentationKind::TimeReverse, AugmentationKind::FreqFlip] {
        let twice = apply(kind, &p, &apply(kind, &p, &mel).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        ensure(twice == mel, || format!("{kind} is not an involution"))?;
    }
    for kind in AugmentationKind::ALL {
        let out = apply(kind, &p, &mel).map_err(|e| e.to_string())?;
        ensure(out.shape() == mel.shape(), || format!("{kind} changed the shape"))?;
    }
    Ok(())
}

fn check_kmeans_mean() -> Result<(), String> {
    let mut rng = seeded(6);
    let pts: Vec<Vec<f64>> = (0..200).map(|_| (0..4).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
    let cb = kmeans_fit(&pts, 1, 0, 300).map_err(|e| e.to_string())?;
    for d in 0..4 {
        let mean = pts.iter().map(|p| p[d]).sum::<f64>() / pts.len() as f64;
        let c = cb.centroids.data()[d] as f64;
        ensure((c - mean).abs() < 1e-6, || format!("dim {d}: {c} vs {mean}"))?;
    }
    Ok(())
}

fn check_causality() -> Result<(), String> {
    let cfg = TransformerConfig::default();
    let model = CodePredictor::<f32>::new(&cfg).map_err(|e| e.to_string())?;
    let mut rng = seeded(8);
    let ctx: Vec<u32> = (0..cfg.context_len).map(|_| rng.random_range(0..cfg.vocab as u32)).collect();
    let base = model.block_outputs(&ctx).map_err(|e| e.to_string())?;
    for t in 0..cfg.context_len {
        let mut edited = ctx.clone();
        edited[t..].iter_mut().for_each(|v| *v = (*v + 1) % cfg.vocab as u32);
        let out = model.block_outputs(&edited).map_err(|e| e.to_string())?;
        let w = t * cfg.embed_dim;
        ensure(out.data()[..w] == base.data()[..w], || format!("positions before {t} moved"))?;
    }
    Ok(())
}

fn check_shape_chain() -> Result<(), String> {
    let tone = AudioClip::new(
        (0..22_050).map(|n| (0.5 * (2.0 * std::f64::consts::PI * 440.0 * n as f64 / 22_050.0).sin()) as f32).collect(),
        22_050,
    );
    let mel = preprocess(&tone, &LogMel::new()).map_err(|e| e.to_string())?;
    ensure(mel.shape() == (DOWN_MELS, DOWN_FRAMES), || format!("spectrogram {:?}", mel.shape()))?;
    let patches = extract_patches(&mel, 0).map_err(|e| e.to_string())?;
    ensure(patches.len() == PATCHES_PER_CLIP && patches[0].values.len() == 256, || {
        format!("{} patches of {}", patches.len(), patches[0].values.len())
    })
}

fn check_formats() -> Result<(), String> {
    let t = Tensor::new(&[2, 3], vec![0.5f32, -1.0, 2.0, 1e-30, f32::MAX, -0.0]).unwrap();
    let bytes = encode(&TensorData::F32(t.clone())).map_err(|e| e.to_string())?;
    ensure(bytes.len() == 53, || format!("{} bytes", bytes.len()))?;
    let back = decode(&bytes, Path::new("selftest")).map_err(|e| e.to_string())?;
    ensure(back == TensorData::F32(t), || "tensor round trip differs".into())?;
    let clip = AudioClip::new(vec![1.0, -1.0, 0.0], 16_000);
    let wav = decode_wav(&encode_wav_i16(&clip), Path::new("selftest")).map_err(|e| e.to_string())?;
    ensure((wav.samples[0] - 1.0).abs() < 1e-4, || format!("full scale decodes to {}", wav.samples[0]))
}

pub const CHECKS: &[(&str, Check)] = &[
    ("softmax cross-entropy hand value", check_cross_entropy),
    ("NT-Xent matches direct evaluation", check_nt_xent),
    ("NT-Xent gradient", check_nt_xent_gradient),
    ("augmentation involutions and shapes", check_augment_involutions),
    ("k-means k=1 centroid is the mean", check_kmeans_mean),
    ("transformer causality", check_causality),
    ("clip to patch shape chain", check_shape_chain),
    ("tensor file and WAV formats", check_formats),
];

/// Prints one PASS/FAIL line per check and returns the number of failures.
pub fn run(out: &mut impl Write) -> usize {
    let mut failures = 0;
    for (name, check) in CHECKS {
        match check() {
            Ok(()) => {
                let _ = writeln!(out, "PASS {name}");
            }
            Err(why) => {
                failures += 1;
                let _ = writeln!(out, "FAIL {name}: {why}");
            }
        }
    }
    failures
}
