//! Discrete tokenization of spectrograms: 64x4 patches are embedded by a
//! fully connected autoencoder and quantized against a k-means codebook,
//! giving 50 tokens per 64x200 spectrogram.

#[cfg(not(feature = "std"))]
use num_traits::Float;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::nn::{seeded, Dense};
use crate::tensor::{Adam, Graph, LrSchedule, ParamId, ParamStore, Real, Tensor, Var};

pub const PATCH_FRAMES: usize = 4;
pub const PATCHES_PER_CLIP: usize = 50;
pub const BOTTLENECK_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// Mel-major `[n_mels, PATCH_FRAMES]` slab, flattened.
    pub values: Vec<f32>,
    pub clip_id: usize,
    pub position: usize,
}

/// Non-overlapping `PATCH_FRAMES`-wide slabs along time, in order.
pub fn extract_patches(mel: &MelSpectrogram, clip_id: usize) -> Result<Vec<Patch>> {
    let (n_mels, n_frames) = mel.shape();
    if n_frames % PATCH_FRAMES != 0 {
        return Err(Error::dim("extract_patches", &[n_mels, n_frames], &[n_mels, PATCH_FRAMES]));
    }
    Ok((0..n_frames / PATCH_FRAMES)
        .map(|position| {
            let mut values = Vec::with_capacity(n_mels * PATCH_FRAMES);
            for f in 0..n_mels {
                let start = f * n_frames + position * PATCH_FRAMES;
                values.extend_from_slice(&mel.data()[start..start + PATCH_FRAMES]);
            }
            Patch {
                values,
                clip_id,
                position,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    pub bottleneck_dim: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 64 * PATCH_FRAMES,
            hidden_dim: 1024,
            hidden_layers: 3,
            bottleneck_dim: BOTTLENECK_DIM,
        }
    }
}

/// Rectified hidden layers; the bottleneck and output layers are linear.
/// Inputs are standardized per dimension with corpus statistics stored in the
/// parameter store (`ae.input_mean`, `ae.input_std`), which are never trained.
#[derive(Debug, Clone)]
pub struct PatchAutoencoder<T: Real = f32> {
    pub store: ParamStore<T>,
    pub encoder: Vec<Dense>,
    pub decoder: Vec<Dense>,
    pub input_mean: ParamId,
    pub input_std: ParamId,
    pub config: AutoencoderConfig,
}

impl<T: Real> PatchAutoencoder<T> {
    pub fn new(config: &AutoencoderConfig, seed: u64) -> Result<Self> {
        if config.input_dim == 0 || config.hidden_dim == 0 || config.bottleneck_dim == 0 {
            return Err(Error::Config(format!("autoencoder dimensions must be positive: {config:?}")));
        }
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let input_mean = store.add_zeros("ae.input_mean", &[config.input_dim])?;
        let input_std = store.add("ae.input_std", Tensor::full(&[config.input_dim], T::one()))?;
        let mut dims = vec![config.input_dim];
        dims.extend(core::iter::repeat_n(config.hidden_dim, config.hidden_layers));
        dims.push(config.bottleneck_dim);
        let mut encoder = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            encoder.push(Dense::new(&mut store, &format!("ae.enc{i}"), w[0], w[1], &mut rng)?);
        }
        dims.reverse();
        let mut decoder = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            decoder.push(Dense::new(&mut store, &format!("ae.dec{i}"), w[0], w[1], &mut rng)?);
        }
        Ok(Self {
            store,
            encoder,
            decoder,
            input_mean,
            input_std,
            config: config.clone(),
        })
    }

    fn stack(g: &mut Graph<'_, T>, layers: &[Dense], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i + 1 < layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    pub fn encode_var(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        Self::stack(g, &self.encoder, x)
    }

    pub fn decode_var(&self, g: &mut Graph<'_, T>, z: Var) -> Result<Var> {
        Self::stack(g, &self.decoder, z)
    }

    /// Standardized `[rows, input_dim]` batch.
    pub fn standardize(&self, rows: &[&[f32]]) -> Result<Tensor<T>> {
        let d = self.config.input_dim;
        let mean = self.store.value(self.input_mean).data();
        let std = self.store.value(self.input_std).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::dim("autoencoder input", &[d], &[r.len()]));
            }
            out.extend(r.iter().zip(mean).zip(std).map(|((&v, &m), &s)| (T::lit(v as f64) - m) / s));
        }
        Tensor::new(&[rows.len().max(1), d], out)
    }

    /// Bottleneck embeddings, `[rows, bottleneck_dim]`.
    pub fn embed(&self, rows: &[&[f32]]) -> Result<Tensor<T>> {
        if rows.is_empty() {
            return Err(Error::Input("no patches to embed".into()));
        }
        let x = self.standardize(rows)?;
        let mut g = Graph::with_params(&self.store);
        let x = g.input(x);
        let z = self.encode_var(&mut g, x)?;
        Ok(g.tensor(z))
    }

    /// Reconstructions in the standardized domain.
    pub fn reconstruct(&self, rows: &[&[f32]]) -> Result<Tensor<T>> {
        let x = self.standardize(rows)?;
        let mut g = Graph::with_params(&self.store);
        let x = g.input(x);
        let z = self.encode_var(&mut g, x)?;
        let y = self.decode_var(&mut g, z)?;
        Ok(g.tensor(y))
    }

    /// Mean squared reconstruction error of a standardized batch, as a node.
    pub fn loss_var(&self, g: &mut Graph<'_, T>, standardized: &Tensor<T>) -> Result<Var> {
        let x = g.input(standardized.clone());
        let z = self.encode_var(g, x)?;
        let y = self.decode_var(g, z)?;
        g.mse(y, standardized.data())
    }

    /// Fits per-dimension mean and standard deviation (zero spread maps to 1).
    pub fn fit_standardization(&mut self, rows: &[&[f32]]) -> Result<()> {
        let d = self.config.input_dim;
        if rows.is_empty() {
            return Err(Error::Input("no patches to fit".into()));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0f64; d];
        for r in rows {
            if r.len() != d {
                return Err(Error::dim("autoencoder input", &[d], &[r.len()]));
            }
            for (m, &v) in mean.iter_mut().zip(r.iter()) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0f64; d];
        for r in rows {
            for ((s, &m), &v) in var.iter_mut().zip(&mean).zip(r.iter()) {
                *s += (v as f64 - m).powi(2);
            }
        }
        let std: Vec<T> = var
            .iter()
            .map(|&s| {
                let sd = (s / n).sqrt();
                T::lit(if sd > 1e-6 { sd } else { 1.0 })
            })
            .collect();
        self.store.value_mut(self.input_mean).data_mut().copy_from_slice(
            &mean.iter().map(|&m| T::lit(m)).collect::<Vec<_>>(),
        );
        self.store.value_mut(self.input_std).data_mut().copy_from_slice(&std);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    /// Train on at most this many patches, drawn without replacement.
    pub max_patches: Option<usize>,
    pub seed: u64,
}

impl Default for AutoencoderTraining {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            schedule: LrSchedule::default(),
            max_patches: None,
            seed: 0,
        }
    }
}

/// Fits standardization on the training patches, then minimizes MSE with
/// Adam. Returns the mean loss of each epoch.
pub fn train_autoencoder(
    ae: &mut PatchAutoencoder<f32>,
    patches: &[&[f32]],
    training: &AutoencoderTraining,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if patches.is_empty() {
        return Err(Error::Input("autoencoder training needs at least one patch".into()));
    }
    if training.epochs == 0 || training.batch_size == 0 {
        return Err(Error::Config("autoencoder epochs and batch_size must be positive".into()));
    }
    training.schedule.validate()?;
    let mut rng = seeded(training.seed);
    let mut chosen: Vec<&[f32]> = patches.to_vec();
    if let Some(limit) = training.max_patches {
        if limit < chosen.len() {
            chosen.shuffle(&mut rng);
            chosen.truncate(limit.max(1));
        }
    }
    ae.fit_standardization(&chosen)?;
    let data = ae.standardize(&chosen)?;
    let d = ae.config.input_dim;
    let mut adam = Adam::new(&ae.store);
    let mut order: Vec<usize> = (0..chosen.len()).collect();
    let mut curve = Vec::with_capacity(training.epochs);
    for epoch in 0..training.epochs {
        let lr = training.schedule.lr(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(training.batch_size) {
            let mut x = Vec::with_capacity(batch.len() * d);
            for &i in batch {
                x.extend_from_slice(&data.data()[i * d..(i + 1) * d]);
            }
            let x = Tensor::new(&[batch.len(), d], x)?;
            let (loss, grads) = {
                let mut g = Graph::with_params(&ae.store);
                let l = ae.loss_var(&mut g, &x)?;
                (g.scalar(l), g.backward(l)?.for_params(&ae.store))
            };
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("autoencoder loss became {loss} in epoch {epoch}")));
            }
            adam.step(&mut ae.store, &grads, lr)?;
            total += loss as f64 * batch.len() as f64;
        }
        let mean = total / chosen.len() as f64;
        on_epoch(epoch, mean);
        curve.push(mean);
    }
    Ok(curve)
}

/// k centroids in the bottleneck space.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// `[k, dim]`.
    pub centroids: Tensor<f32>,
    pub inertia: f64,
    /// Inertia after each assignment step, ending with the final inertia.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub seed: u64,
}

impl Codebook {
    pub fn from_centroids(centroids: Tensor<f32>, seed: u64) -> Result<Self> {
        let (k, _) = centroids.dims2()?;
        centroids.ensure_finite("codebook centroids")?;
        for i in 0..k {
            for j in 0..i {
                if centroids.row(i) == centroids.row(j) {
                    return Err(Error::Input(format!("centroids {j} and {i} are identical")));
                }
            }
        }
        Ok(Self {
            centroids,
            inertia: f64::NAN,
            inertia_history: Vec::new(),
            iterations: 0,
            seed,
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centroids.shape()[1]
    }

    /// Nearest centroid by Euclidean distance; ties go to the lowest index.
    pub fn assign(&self, point: &[f32]) -> usize {
        let p: Vec<f64> = point.iter().map(|&v| v as f64).collect();
        let rows = self.centroids.data().chunks(self.dim());
        nearest(rows.map(|c| c.iter().map(|&v| v as f64)), &p).0
    }
}

fn sq_dist(a: impl Iterator<Item = f64>, b: &[f64]) -> f64 {
    a.zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest<I, C>(centroids: I, p: &[f64]) -> (usize, f64)
where
    I: Iterator<Item = C>,
    C: Iterator<Item = f64>,
{
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.enumerate() {
        let d = sq_dist(c, p);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

pub const KMEANS_MAX_ITERS: usize = 300;

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or `max_iters` updates have run. A cluster that empties is moved
/// onto the point currently farthest from its centroid. Arithmetic is `f64`.
pub fn kmeans_fit(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<Codebook> {
    let m = points.len();
    if k == 0 {
        return Err(Error::Parameter("k must be positive".into()));
    }
    if m < k {
        return Err(Error::Input(format!("k-means needs at least k={k} points, got {m}")));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("k-means points must share a positive dimension".into()));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("k-means input has non-finite values".into()));
    }
    let distinct = {
        let mut keys: Vec<Vec<u64>> = points.iter().map(|p| p.iter().map(|v| v.to_bits()).collect()).collect();
        keys.sort_unstable();
        keys.dedup();
        keys.len()
    };
    if distinct < k {
        return Err(Error::Input(format!(
            "k-means needs at least k={k} distinct points, got {distinct}"
        )));
    }

    let mut rng = seeded(seed);
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..m)].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(centroids[0].iter().copied(), p)).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.random_range(0.0..total);
        let mut pick = m - 1;
        for (i, &w) in d2.iter().enumerate() {
            if w > 0.0 && target < w {
                pick = i;
                break;
            }
            target -= w;
        }
        while d2[pick] == 0.0 {
            pick -= 1;
        }
        centroids.push(points[pick].clone());
        for (dist, p) in d2.iter_mut().zip(points) {
            *dist = dist.min(sq_dist(centroids[centroids.len() - 1].iter().copied(), p));
        }
    }

    let assign_all = |centroids: &[Vec<f64>], labels: &mut [usize], dists: &mut [f64]| -> f64 {
        let mut inertia = 0.0;
        for ((p, l), d) in points.iter().zip(labels.iter_mut()).zip(dists.iter_mut()) {
            let (j, dist) = nearest(centroids.iter().map(|c| c.iter().copied()), p);
            *l = j;
            *d = dist;
            inertia += dist;
        }
        inertia
    };

    let mut labels = vec![usize::MAX; m];
    let mut dists = vec![0.0; m];
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut previous = labels.clone();
    loop {
        let inertia = assign_all(&centroids, &mut labels, &mut dists);
        history.push(inertia);
        if labels == previous || iterations == max_iters {
            break;
        }
        previous.clone_from(&labels);
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, &v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let n = counts[j] as f64;
                centroids[j] = sums[j].iter().map(|s| s / n).collect();
            } else {
                let far = (0..m).fold(0, |best, i| if dists[i] > dists[best] { i } else { best });
                centroids[j] = points[far].clone();
                dists[far] = 0.0;
            }
        }
        iterations += 1;
    }
    let inertia = *history.last().unwrap_or(&0.0);
    let flat: Vec<f32> = centroids.iter().flatten().map(|&v| v as f32).collect();
    let mut cb = Codebook::from_centroids(Tensor::new(&[k, dim], flat)?, seed)?;
    cb.inertia = inertia;
    cb.inertia_history = history;
    cb.iterations = iterations;
    Ok(cb)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub clip_id: usize,
    pub label: Option<usize>,
}

/// Embeds each patch of `mel` and assigns it to its nearest centroid.
pub fn tokenize(
    mel: &MelSpectrogram,
    ae: &PatchAutoencoder<f32>,
    cb: &Codebook,
    clip_id: usize,
    label: Option<usize>,
) -> Result<TokenSequence> {
    if ae.config.bottleneck_dim != cb.dim() {
        return Err(Error::Config(format!(
            "autoencoder bottleneck {} does not match codebook dimension {}",
            ae.config.bottleneck_dim,
            cb.dim()
        )));
    }
    let patches = extract_patches(mel, clip_id)?;
    let rows: Vec<&[f32]> = patches.iter().map(|p| p.values.as_slice()).collect();
    let z = ae.embed(&rows)?;
    let tokens = (0..rows.len()).map(|i| cb.assign(z.row(i)) as u32).collect();
    Ok(TokenSequence { tokens, clip_id, label })
}
