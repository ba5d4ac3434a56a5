use proptest::prelude::*;
use rand::Rng;
use sonanza_core::contrastive::{
    contrastive_loss, nt_xent_loss, similarity_matrix, train_contrastive, ContrastiveModel, ContrastiveRunConfig,
    EncoderConfig, Stage,
};
use sonanza_core::dsp::{preprocess, LogMel, MelSpectrogram};
use sonanza_core::nn::seeded;
use sonanza_core::synthetic::{generate_synthetic, SyntheticSpec};
use sonanza_core::tensor::{grad_check, grad_check_params, Graph, LrSchedule, Tensor, DEFAULT_EPS};

/// Direct evaluation of the loss: cosine similarities, then the per-pair
/// terms l(i, j) summed over 1-based pairs (2k-1, 2k) in both orders.
fn brute_force_loss(z: &[Vec<f64>], tau: f64) -> f64 {
    let m = z.len();
    let norm = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let sim = |i: usize, j: usize| {
        z[i].iter().zip(&z[j]).map(|(a, b)| a * b).sum::<f64>() / (norm(&z[i]) * norm(&z[j]))
    };
    let l = |i: usize, j: usize| {
        let den: f64 = (0..m).filter(|&k| k != i).map(|k| (sim(i, k) / tau).exp()).sum();
        -((sim(i, j) / tau).exp() / den).ln()
    };
    let n = m / 2;
    let mut total = 0.0;
    for k in 1..=n {
        let (a, b) = (2 * k - 2, 2 * k - 1);
        total += l(a, b) + l(b, a);
    }
    total / (2 * n) as f64
}

fn to_tensor(z: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::new(&[z.len(), z[0].len()], z.concat()).unwrap()
}

fn random_rows(rng: &mut impl Rng, rows: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

fn loss_of(z: &[Vec<f64>], tau: f64) -> f64 {
    nt_xent_loss(&similarity_matrix(&to_tensor(z)).unwrap(), tau).unwrap()
}

#[test]
fn matches_brute_force() {
    let mut rng = seeded(2);
    for trial in 0..100 {
        let n = [1, 2, 4, 8][trial % 4];
        let tau = [0.1, 0.5, 1.0][trial % 3];
        let z = random_rows(&mut rng, 2 * n, 16);
        let got = loss_of(&z, tau);
        let want = brute_force_loss(&z, tau);
        if n == 1 {
            assert_eq!(got, 0.0);
        } else {
            assert!((got - want).abs() <= 1e-5 * want.abs().max(1e-12), "{got} vs {want}");
        }
    }
}

#[test]
fn mismatched_orthogonal_pairs() {
    let e1 = vec![1.0, 0.0];
    let e2 = vec![0.0, 1.0];
    let z = vec![e1.clone(), e1, e2.clone(), e2];
    let e2x = std::f64::consts::E.powi(2);
    let want = ((e2x + 2.0) / e2x).ln();
    assert!((loss_of(&z, 0.5) - want).abs() < 1e-12);
    assert!((want - 0.2395).abs() < 1e-4);
}

#[test]
fn high_temperature_approaches_uniform() {
    let mut rng = seeded(5);
    for n in [2, 4, 8, 16] {
        let z = random_rows(&mut rng, 2 * n, 32);
        let want = ((2 * n - 1) as f64).ln();
        assert!((loss_of(&z, 100.0) - want).abs() <= 0.05 * want);
    }
}

#[test]
fn loss_gradient_wrt_projections() {
    let mut rng = seeded(9);
    for n in [2, 4] {
        let z = to_tensor(&random_rows(&mut rng, 2 * n, 6));
        for tau in [0.1, 0.5, 1.0] {
            let r = grad_check(|g, x| contrastive_loss(g, x, tau), &z, DEFAULT_EPS).unwrap();
            assert!(r.max_rel_error < 1e-5, "n={n} tau={tau}: {}", r.max_rel_error);
        }
    }
}

fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        conv_stack: vec![
            Stage::Conv {
                channels: 2,
                kernel: 3,
                stride: 1,
            },
            Stage::MaxPool { size: 2 },
            Stage::Conv {
                channels: 3,
                kernel: 3,
                stride: 1,
            },
            Stage::MaxPool { size: 2 },
        ],
        embedding_dim: 8,
        input_shape: (8, 12),
        width_multiplier: 1.0,
    }
}

#[test]
fn gradient_reaches_encoder_through_head() {
    let model = ContrastiveModel::<f64>::new(&tiny_config(), 4).unwrap();
    let mut rng = seeded(11);
    let views: Vec<MelSpectrogram> = (0..4)
        .map(|_| MelSpectrogram::new(Tensor::from_fn(&[8, 12], |_| rng.random_range(-3.0..3.0)), 1e-10).unwrap())
        .collect();
    let refs: Vec<&MelSpectrogram> = views.iter().collect();
    let r = grad_check_params(&model.store, |g| model.batch_loss(g, &refs, 0.5), DEFAULT_EPS, 24).unwrap();
    assert!(r.max_rel_error < 1e-5, "{}", r.max_rel_error);
    let mut g = Graph::with_params(&model.store);
    let l = model.batch_loss(&mut g, &refs, 0.5).unwrap();
    let grads = g.backward(l).unwrap().for_params(&model.store);
    let conv0 = model.store.find("encoder.conv0.weight").unwrap();
    assert!(grads[conv0.index()].as_ref().unwrap().iter().any(|&v| v != 0.0));
}

fn synthetic_mels(clips_per_class: usize) -> Vec<MelSpectrogram> {
    let spec = SyntheticSpec {
        clips_per_class,
        ..Default::default()
    };
    let analysis = LogMel::new();
    generate_synthetic(&spec)
        .unwrap()
        .iter()
        .map(|c| preprocess(&c.audio, &analysis).unwrap())
        .collect()
}

#[test]
fn short_run_lowers_loss_and_is_reproducible() {
    let mels: Vec<MelSpectrogram> = synthetic_mels(6).into_iter().take(16).collect();
    let config = ContrastiveRunConfig {
        tau: 0.5,
        batch_n: 8,
        epochs: 15,
        schedule: LrSchedule::constant(1e-3, 15),
        seed: 3,
    };
    let run = || {
        let mut model = ContrastiveModel::<f32>::new(&EncoderConfig::reduced(0.25), 1).unwrap();
        train_contrastive(&mut model, &mels, &config, |_| {}).unwrap()
    };
    let log = run();
    assert_eq!(log.len(), 30);
    let head: f64 = log[..4].iter().map(|r| r.loss).sum::<f64>() / 4.0;
    let tail: f64 = log[26..].iter().map(|r| r.loss).sum::<f64>() / 4.0;
    assert!(tail < head, "loss went from {head} to {tail}");
    assert!(log.last().unwrap().loss < log[0].loss);
    let again = run();
    let bits = |l: &[sonanza_core::contrastive::LossRecord]| l.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&log), bits(&again));
}

#[test]
fn empty_dataset_is_rejected() {
    let mut model = ContrastiveModel::<f32>::new(&EncoderConfig::reduced(0.25), 1).unwrap();
    let r = train_contrastive(&mut model, &[], &ContrastiveRunConfig::default(), |_| {});
    assert!(matches!(r, Err(sonanza_core::Error::Input(_))));
}

fn arb_batch() -> impl Strategy<Value = (Vec<Vec<f64>>, f64)> {
    (1usize..6, 2usize..8).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), 2 * n),
            prop::sample::select(vec![0.1, 0.5, 1.0]),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn similarity_is_symmetric_with_unit_diagonal((z, _) in arb_batch()) {
        prop_assume!(z.iter().all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-6));
        let s = similarity_matrix(&to_tensor(&z)).unwrap();
        let m = z.len();
        for i in 0..m {
            prop_assert!((s.at2(i, i) - 1.0).abs() < 1e-6);
            for j in 0..m {
                prop_assert!((s.at2(i, j) - s.at2(j, i)).abs() < 1e-6);
                prop_assert!(s.at2(i, j).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn loss_is_non_negative_and_scale_invariant((z, tau) in arb_batch(), c in 0.01f64..100.0) {
        prop_assume!(z.iter().all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-6));
        let base = loss_of(&z, tau);
        prop_assert!(base >= 0.0);
        let scaled: Vec<Vec<f64>> = z.iter().map(|r| r.iter().map(|x| x * c).collect()).collect();
        prop_assert!((loss_of(&scaled, tau) - base).abs() < 1e-6);
    }

    #[test]
    fn loss_ignores_source_order((z, tau) in arb_batch(), seed in any::<u64>()) {
        prop_assume!(z.iter().all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-6));
        let mut sources: Vec<usize> = (0..z.len() / 2).collect();
        let mut rng = seeded(seed);
        rand::seq::SliceRandom::shuffle(&mut sources[..], &mut rng);
        let permuted: Vec<Vec<f64>> = sources.iter().flat_map(|&k| [z[2 * k].clone(), z[2 * k + 1].clone()]).collect();
        prop_assert!((loss_of(&permuted, tau) - loss_of(&z, tau)).abs() < 1e-6);
    }
}
