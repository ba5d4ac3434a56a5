use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sonanza_core::codebook::{
    extract_patches, kmeans_fit, tokenize, train_autoencoder, AutoencoderConfig, AutoencoderTraining, Codebook,
    PatchAutoencoder, KMEANS_MAX_ITERS,
};
use sonanza_core::dsp::MelSpectrogram;
use sonanza_core::nn::seeded;
use sonanza_core::tensor::{grad_check_params, Graph, LrSchedule, Tensor, DEFAULT_EPS};

fn inertia(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .map(|p| {
            centroids
                .iter()
                .map(|c| c.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

/// Plain Lloyd from `k` distinct uniformly drawn points, run to convergence.
fn lloyd_from_random(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> f64 {
    let mut idx: Vec<usize> = Vec::new();
    while idx.len() < k {
        let i = rng.random_range(0..points.len());
        if !idx.contains(&i) {
            idx.push(i);
        }
    }
    let mut c: Vec<Vec<f64>> = idx.iter().map(|&i| points[i].clone()).collect();
    for _ in 0..200 {
        let mut sums = vec![vec![0.0; points[0].len()]; k];
        let mut counts = vec![0usize; k];
        for p in points {
            let j = (0..k)
                .min_by(|&a, &b| {
                    let da: f64 = c[a].iter().zip(p).map(|(x, y)| (x - y) * (x - y)).sum();
                    let db: f64 = c[b].iter().zip(p).map(|(x, y)| (x - y) * (x - y)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            counts[j] += 1;
            sums[j].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for j in 0..k {
            if counts[j] > 0 {
                c[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    inertia(points, &c)
}

fn blobs(seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = seeded(seed);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let means: Vec<Vec<f64>> = (0..3)
        .map(|b| (0..16).map(|d| if d % 3 == b { 10.0 } else { 0.0 } + rng.random_range(-1.0..1.0)).collect())
        .collect();
    let points = (0..600)
        .map(|i| means[i % 3].iter().map(|m| m + noise.sample(&mut rng)).collect())
        .collect();
    (points, means)
}

#[test]
fn recovers_separated_blobs() {
    let (points, means) = blobs(1);
    let cb = kmeans_fit(&points, 3, 4, KMEANS_MAX_ITERS).unwrap();
    for m in &means {
        let closest = (0..3)
            .map(|j| cb.centroids.row(j).iter().zip(m).map(|(&c, v)| (c as f64 - v).powi(2)).sum::<f64>().sqrt())
            .fold(f64::INFINITY, f64::min);
        assert!(closest < 0.1, "centroid off by {closest}");
    }
    let mut rng = seeded(99);
    let oracle = (0..20).map(|_| lloyd_from_random(&points, 3, &mut rng)).fold(f64::INFINITY, f64::min);
    assert!((cb.inertia - oracle).abs() <= 0.01 * oracle, "{} vs {oracle}", cb.inertia);
}

#[test]
fn single_cluster_is_the_mean() {
    let mut rng = seeded(2);
    let points: Vec<Vec<f64>> = (0..257).map(|_| (0..16).map(|_| rng.random_range(-3.0..5.0)).collect()).collect();
    let cb = kmeans_fit(&points, 1, 0, KMEANS_MAX_ITERS).unwrap();
    let m = points.len() as f64;
    let mean: Vec<f64> = (0..16).map(|d| points.iter().map(|p| p[d]).sum::<f64>() / m).collect();
    for (c, mu) in cb.centroids.row(0).iter().zip(&mean) {
        assert!((*c as f64 - mu).abs() < 1e-6);
    }
    let total_var: f64 = (0..16)
        .map(|d| points.iter().map(|p| (p[d] - mean[d]).powi(2)).sum::<f64>() / m)
        .sum();
    assert!((cb.inertia - total_var * m).abs() <= 1e-9 * cb.inertia);
}

#[test]
fn fit_is_deterministic() {
    let (points, _) = blobs(3);
    assert_eq!(kmeans_fit(&points, 5, 8, 50).unwrap(), kmeans_fit(&points, 5, 8, 50).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn inertia_never_increases(seed in any::<u64>(), k in 1usize..12) {
        let mut rng = seeded(seed);
        let points: Vec<Vec<f64>> = (0..120).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let cb = kmeans_fit(&points, k, seed, KMEANS_MAX_ITERS).unwrap();
        for w in cb.inertia_history.windows(2) {
            prop_assert!(w[1] <= w[0], "{} then {}", w[0], w[1]);
        }
        prop_assert_eq!(cb.k(), k);
    }
}

fn small_ae() -> PatchAutoencoder<f32> {
    let config = AutoencoderConfig {
        hidden_dim: 32,
        ..Default::default()
    };
    PatchAutoencoder::new(&config, 5).unwrap()
}

fn random_mel(seed: u64) -> MelSpectrogram {
    let mut rng = seeded(seed);
    MelSpectrogram::new(Tensor::from_fn(&[64, 200], |_| rng.random_range(-20.0..5.0)), 1e-10).unwrap()
}

fn codebook_for(ae: &PatchAutoencoder<f32>, k: usize) -> Codebook {
    let mel = random_mel(77);
    let patches = extract_patches(&mel, 0).unwrap();
    let rows: Vec<&[f32]> = patches.iter().map(|p| p.values.as_slice()).collect();
    let z = ae.embed(&rows).unwrap();
    let pts: Vec<Vec<f64>> = (0..50).map(|i| z.row(i).iter().map(|&v| v as f64).collect()).collect();
    kmeans_fit(&pts, k, 1, KMEANS_MAX_ITERS).unwrap()
}

#[test]
fn tokens_match_exhaustive_scan() {
    let ae = small_ae();
    let cb = codebook_for(&ae, 8);
    let mel = random_mel(12);
    let seq = tokenize(&mel, &ae, &cb, 4, Some(2)).unwrap();
    assert_eq!(seq.tokens.len(), 50);
    assert_eq!((seq.clip_id, seq.label), (4, Some(2)));
    let patches = extract_patches(&mel, 4).unwrap();
    for (p, &tok) in patches.iter().zip(&seq.tokens) {
        let z = ae.embed(&[p.values.as_slice()]).unwrap();
        let mut best = (0usize, f64::INFINITY);
        for j in 0..cb.k() {
            let d: f64 = cb.centroids.row(j).iter().zip(z.data()).map(|(&c, &v)| (c as f64 - v as f64).powi(2)).sum();
            if d < best.1 {
                best = (j, d);
            }
        }
        assert_eq!(tok as usize, best.0);
    }
}

#[test]
fn constant_spectrogram_gives_one_token() {
    let ae = small_ae();
    let cb = codebook_for(&ae, 8);
    let seq = tokenize(&MelSpectrogram::constant(64, 200, -4.0), &ae, &cb, 0, None).unwrap();
    assert!(seq.tokens.iter().all(|&t| t == seq.tokens[0]));
    assert!(seq.tokens.iter().all(|&t| (t as usize) < cb.k()));
}

#[test]
fn permuting_centroids_permutes_tokens() {
    let ae = small_ae();
    let cb = codebook_for(&ae, 8);
    let perm = [3usize, 7, 0, 5, 1, 6, 2, 4];
    let mut data = Vec::new();
    for &p in &perm {
        data.extend_from_slice(cb.centroids.row(p));
    }
    let permuted = Codebook::from_centroids(Tensor::new(&[8, cb.dim()], data).unwrap(), 0).unwrap();
    let mel = random_mel(13);
    let a = tokenize(&mel, &ae, &cb, 0, None).unwrap();
    let b = tokenize(&mel, &ae, &permuted, 0, None).unwrap();
    for (&ta, &tb) in a.tokens.iter().zip(&b.tokens) {
        assert_eq!(perm[tb as usize], ta as usize);
    }
}

#[test]
fn mismatched_dimensions_are_a_config_error() {
    let ae = small_ae();
    let cb = Codebook::from_centroids(Tensor::new(&[2, 3], vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap(), 0).unwrap();
    let r = tokenize(&MelSpectrogram::constant(64, 200, 0.0), &ae, &cb, 0, None);
    assert!(matches!(r, Err(sonanza_core::Error::Config(_))));
}

#[test]
fn autoencoder_gradient_full_width() {
    let ae = PatchAutoencoder::<f64>::new(&AutoencoderConfig::default(), 3).unwrap();
    let mut rng = seeded(6);
    let x = Tensor::from_fn(&[1, 256], |_| rng.random_range(-1.0..1.0));
    let r = grad_check_params(&ae.store, |g: &mut Graph<'_, f64>| ae.loss_var(g, &x), DEFAULT_EPS, 6).unwrap();
    assert!(r.max_rel_error < 1e-5, "{}", r.max_rel_error);
}

#[test]
fn repeated_patch_is_reconstructed() {
    let mut ae = small_ae();
    let patch: Vec<f32> = (0..256).map(|i| (i as f32 * 0.37).sin() * 5.0 - 8.0).collect();
    let rows: Vec<&[f32]> = vec![patch.as_slice(); 64];
    let training = AutoencoderTraining {
        epochs: 5,
        batch_size: 16,
        schedule: LrSchedule::constant(1e-3, 5),
        max_patches: None,
        seed: 0,
    };
    train_autoencoder(&mut ae, &rows, &training, |_, _| {}).unwrap();
    let y = ae.reconstruct(&[&patch]).unwrap();
    let target = ae.standardize(&[&patch]).unwrap();
    let mse: f64 = y.data().iter().zip(target.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / 256.0;
    assert!(mse < 1e-3, "{mse}");
}

#[test]
fn training_curve_trends_down() {
    let mut ae = small_ae();
    let mels: Vec<MelSpectrogram> = (0..4).map(random_mel).collect();
    let patches: Vec<_> = mels.iter().flat_map(|m| extract_patches(m, 0).unwrap()).collect();
    let rows: Vec<&[f32]> = patches.iter().map(|p| p.values.as_slice()).collect();
    let training = AutoencoderTraining {
        epochs: 20,
        batch_size: 32,
        schedule: LrSchedule::constant(1e-3, 20),
        max_patches: None,
        seed: 1,
    };
    let curve = train_autoencoder(&mut ae, &rows, &training, |_, _| {}).unwrap();
    for w in curve.windows(2) {
        assert!(w[1] <= w[0] * 1.05, "{} -> {}", w[0], w[1]);
    }
    assert!(curve.last().unwrap() < &curve[0]);
    assert!(matches!(
        train_autoencoder(&mut ae, &[], &training, |_, _| {}),
        Err(sonanza_core::Error::Input(_))
    ));
}
