//! Contrastive pretraining: a VGG-style convolutional encoder, a two-layer
//! projection head, cosine similarities and the NT-Xent objective.
//!
//! Batches hold `2N` views laid out so that rows `2k` and `2k + 1` are the two
//! views of source `k`.

#[cfg(not(feature = "std"))]
use num_traits::Float;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::sample_pair;
use crate::dsp::{MelSpectrogram, DOWN_FRAMES, DOWN_MELS};
use crate::error::{Error, Result};
use crate::nn::{seeded, Conv2d, Dense};
use crate::tensor::{Adam, Graph, LrSchedule, ParamId, ParamStore, Real, Tensor, Var};

pub const EMBEDDING_DIM: usize = 512;
pub const PROJECTION_DIM: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Stage {
    /// Same-padded convolution followed by a rectifier. `channels` is the
    /// nominal width before the width multiplier.
    Conv { channels: usize, kernel: usize, stride: usize },
    MaxPool { size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub conv_stack: Vec<Stage>,
    pub embedding_dim: usize,
    /// `(mel bins, frames)` of the single-channel input.
    pub input_shape: (usize, usize),
    pub width_multiplier: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::vgg16(0.25)
    }
}

impl EncoderConfig {
    fn from_widths(widths: &[usize], width_multiplier: f64) -> Self {
        let conv_stack = widths
            .iter()
            .map(|&w| match w {
                0 => Stage::MaxPool { size: 2 },
                c => Stage::Conv {
                    channels: c,
                    kernel: 3,
                    stride: 1,
                },
            })
            .collect();
        Self {
            conv_stack,
            embedding_dim: EMBEDDING_DIM,
            input_shape: (DOWN_MELS, DOWN_FRAMES),
            width_multiplier,
        }
    }

    /// The thirteen 3x3 convolutions of VGG-16 in five pooled groups, followed
    /// by the dense embedding layer.
    pub fn vgg16(width_multiplier: f64) -> Self {
        const M: usize = 0;
        Self::from_widths(
            &[64, 64, M, 128, 128, M, 256, 256, 256, M, 512, 512, 512, M, 512, 512, 512, M],
            width_multiplier,
        )
    }

    /// Four conv+pool groups; with the default multiplier the widths are
    /// 8, 16, 32, 32.
    pub fn reduced(width_multiplier: f64) -> Self {
        const M: usize = 0;
        Self::from_widths(&[32, M, 64, M, 128, M, 128, M], width_multiplier)
    }

    pub fn channels(&self, nominal: usize) -> usize {
        ((nominal as f64 * self.width_multiplier).round() as usize).max(1)
    }

    /// Output `(channels, height, width)` of the conv stack.
    pub fn feature_shape(&self) -> Result<(usize, usize, usize)> {
        let (mut c, mut h, mut w) = (1, self.input_shape.0, self.input_shape.1);
        for stage in &self.conv_stack {
            match *stage {
                Stage::Conv {
                    channels,
                    kernel,
                    stride,
                } => {
                    if kernel == 0 || stride == 0 || kernel % 2 == 0 {
                        return Err(Error::Config(format!("bad conv stage {stage:?}")));
                    }
                    let pad = kernel / 2;
                    if h + 2 * pad < kernel || w + 2 * pad < kernel {
                        return Err(Error::Config(format!("input too small for {stage:?}")));
                    }
                    c = self.channels(channels);
                    h = (h + 2 * pad - kernel) / stride + 1;
                    w = (w + 2 * pad - kernel) / stride + 1;
                }
                Stage::MaxPool { size } => {
                    if size == 0 || h < size || w < size {
                        return Err(Error::Config(format!("pooling by {size} on {h}x{w}")));
                    }
                    h /= size;
                    w /= size;
                }
            }
        }
        Ok((c, h, w))
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || !(self.width_multiplier > 0.0) {
            return Err(Error::Config(format!(
                "embedding_dim and width_multiplier must be positive: {self:?}"
            )));
        }
        self.feature_shape().map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layer {
    Conv(Conv2d),
    Pool(usize),
}

/// Convolutional encoder producing the embedding used for probing.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    layers: Vec<Layer>,
    dense: Dense,
    /// `[shift, scale]` applied to raw log-mel input as `(x - shift) / scale`.
    /// Stored with the weights but never trained.
    pub input_norm: ParamId,
    flat_dim: usize,
    pub config: EncoderConfig,
}

impl Encoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        config: &EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let input_norm = store.add(
            format!("{name}.input_norm"),
            Tensor::new(&[2], vec![T::zero(), T::one()])?,
        )?;
        let mut layers = Vec::new();
        let mut in_c = 1;
        for (i, stage) in config.conv_stack.iter().enumerate() {
            layers.push(match *stage {
                Stage::Conv {
                    channels,
                    kernel,
                    stride,
                } => {
                    let out_c = config.channels(channels);
                    let conv = Conv2d::new(store, &format!("{name}.conv{i}"), in_c, out_c, kernel, stride, rng)?;
                    in_c = out_c;
                    Layer::Conv(conv)
                }
                Stage::MaxPool { size } => Layer::Pool(size),
            });
        }
        let (c, h, w) = config.feature_shape()?;
        let flat_dim = c * h * w;
        let dense = Dense::new(store, &format!("{name}.embed"), flat_dim, config.embedding_dim, rng)?;
        Ok(Self {
            layers,
            dense,
            input_norm,
            flat_dim,
            config: config.clone(),
        })
    }

    /// Packs spectrograms into a normalized `[batch, 1, mels, frames]` tensor.
    pub fn input_batch<T: Real>(&self, store: &ParamStore<T>, mels: &[&MelSpectrogram]) -> Result<Tensor<T>> {
        let (h, w) = self.config.input_shape;
        if mels.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let norm = store.value(self.input_norm).data();
        let (shift, scale) = (norm[0], norm[1]);
        let mut data = Vec::with_capacity(mels.len() * h * w);
        for m in mels {
            if m.shape() != (h, w) {
                return Err(Error::dim("encoder input", &[h, w], &[m.n_mels(), m.n_frames()]));
            }
            data.extend(m.data().iter().map(|&v| (T::lit(v as f64) - shift) / scale));
        }
        Tensor::new(&[mels.len(), 1, h, w], data)
    }

    /// Maps `[batch, 1, mels, frames]` to `[batch, embedding_dim]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let batch = g.shape(x)[0];
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                Layer::Conv(conv) => {
                    let y = conv.forward(g, h)?;
                    g.relu(y)
                }
                Layer::Pool(size) => g.max_pool2d(h, *size)?,
            };
        }
        let flat = g.reshape(h, &[batch, self.flat_dim])?;
        self.dense.forward(g, flat)
    }
}

/// Two dense layers with a rectifier between them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectionHead {
    pub hidden: Dense,
    pub output: Dense,
}

impl ProjectionHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, in_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            hidden: Dense::new(store, &format!("{name}.hidden"), in_dim, PROJECTION_DIM, rng)?,
            output: Dense::new(store, &format!("{name}.output"), PROJECTION_DIM, PROJECTION_DIM, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, e: Var) -> Result<Var> {
        let h = self.hidden.forward(g, e)?;
        let h = g.relu(h);
        self.output.forward(g, h)
    }
}

/// Encoder plus projection head with their parameters. Encoder parameters are
/// prefixed `encoder.`, head parameters `head.`.
#[derive(Debug, Clone)]
pub struct ContrastiveModel<T: Real = f32> {
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub head: ProjectionHead,
}

impl<T: Real> ContrastiveModel<T> {
    pub fn new(config: &EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, "encoder", config, &mut rng)?;
        let head = ProjectionHead::new(&mut store, "head", config.embedding_dim, &mut rng)?;
        Ok(Self { store, encoder, head })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.encoder.config
    }

    pub fn input_norm(&self) -> (T, T) {
        let v = self.store.value(self.encoder.input_norm).data();
        (v[0], v[1])
    }

    pub fn set_input_norm(&mut self, shift: T, scale: T) -> Result<()> {
        if !(scale > T::zero()) || !shift.is_finite() || !scale.is_finite() {
            return Err(Error::Parameter(format!("bad input normalization ({shift}, {scale})")));
        }
        self.store
            .value_mut(self.encoder.input_norm)
            .data_mut()
            .copy_from_slice(&[shift, scale]);
        Ok(())
    }

    /// Embeddings for a batch of spectrograms, `[n, embedding_dim]`.
    pub fn encode_batch(&self, mels: &[&MelSpectrogram]) -> Result<Tensor<T>> {
        let x = self.encoder.input_batch(&self.store, mels)?;
        let mut g = Graph::with_params(&self.store);
        let x = g.input(x);
        let e = self.encoder.forward(&mut g, x)?;
        Ok(g.tensor(e))
    }

    /// Embeddings for any number of spectrograms, evaluated `chunk` at a time.
    pub fn encode_all(&self, mels: &[MelSpectrogram], chunk: usize) -> Result<Tensor<T>> {
        let dim = self.config().embedding_dim;
        let mut out = Vec::with_capacity(mels.len() * dim);
        for part in mels.chunks(chunk.max(1)) {
            let refs: Vec<&MelSpectrogram> = part.iter().collect();
            out.extend_from_slice(self.encode_batch(&refs)?.data());
        }
        Tensor::new(&[mels.len(), dim], out)
    }

    pub fn encode(&self, mel: &MelSpectrogram) -> Result<Vec<T>> {
        Ok(self.encode_batch(&[mel])?.into_data())
    }

    pub fn project(&self, embedding: &[T]) -> Result<Vec<T>> {
        let dim = self.config().embedding_dim;
        if embedding.len() != dim {
            return Err(Error::dim("project", &[dim], &[embedding.len()]));
        }
        let mut g = Graph::with_params(&self.store);
        let e = g.input(Tensor::new(&[1, dim], embedding.to_vec())?);
        let z = self.head.forward(&mut g, e)?;
        Ok(g.value(z).to_vec())
    }

    /// NT-Xent loss of a paired batch of views as a graph node.
    pub fn batch_loss(&self, g: &mut Graph<'_, T>, views: &[&MelSpectrogram], tau: f64) -> Result<Var> {
        let x = self.encoder.input_batch(&self.store, views)?;
        let x = g.input(x);
        let e = self.encoder.forward(g, x)?;
        let z = self.head.forward(g, e)?;
        contrastive_loss(g, z, tau)
    }
}

/// Cosine-similarity matrix of the rows of `z` followed by NT-Xent.
pub fn contrastive_loss<T: Real>(g: &mut Graph<'_, T>, z: Var, tau: f64) -> Result<Var> {
    let zn = g.row_normalize(z)?;
    let s = g.matmul_t(zn, zn, false, true)?;
    g.nt_xent(s, tau)
}

/// `s[i][j] = <z_i, z_j> / (|z_i| |z_j|)`, clamped to `[-1, 1]`.
pub fn similarity_matrix<T: Real>(z: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let z = g.input(z.clone());
    let zn = g.row_normalize(z)?;
    let s = g.matmul_t(zn, zn, false, true)?;
    Ok(g.tensor(s).map(|v| v.max(-T::one()).min(T::one())))
}

/// Mean over all `2N` rows of `-log(exp(s[i][i^1] / tau) / sum_{k != i} exp(s[i][k] / tau))`.
pub fn nt_xent_loss<T: Real>(s: &Tensor<T>, tau: f64) -> Result<T> {
    let mut g = Graph::new();
    let s = g.input(s.clone());
    let l = g.nt_xent(s, tau)?;
    Ok(g.scalar(l))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveRunConfig {
    pub tau: f64,
    /// Sources per batch; each contributes two views.
    pub batch_n: usize,
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for ContrastiveRunConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            batch_n: 64,
            epochs: 50,
            schedule: LrSchedule::default(),
            seed: 0,
        }
    }
}

impl ContrastiveRunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Parameter(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.batch_n == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_n and epochs must be positive".into()));
        }
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Mean and standard deviation over every entry of every spectrogram.
pub fn corpus_stats(mels: &[MelSpectrogram]) -> (f64, f64) {
    let (mut n, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
    for m in mels {
        for &v in m.data() {
            n += 1;
            sum += v as f64;
            sq += v as f64 * v as f64;
        }
    }
    if n == 0 {
        return (0.0, 1.0);
    }
    let mean = sum / n as f64;
    let std = (sq / n as f64 - mean * mean).max(0.0).sqrt();
    (mean, if std > 1e-12 { std } else { 1.0 })
}

/// Trains encoder and head with Adam on NT-Xent.
///
/// Input normalization is fitted to `data` first. Each epoch shuffles the
/// sources and walks them in batches of `batch_n`; a trailing batch with a
/// single source is skipped because its loss is identically zero.
/// `on_step` sees each record as it is produced.
pub fn train_contrastive(
    model: &mut ContrastiveModel<f32>,
    data: &[MelSpectrogram],
    config: &ContrastiveRunConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Input("contrastive training needs at least one spectrogram".into()));
    }
    let (mean, std) = corpus_stats(data);
    model.set_input_norm(mean as f32, std as f32)?;
    let mut rng = seeded(config.seed);
    let mut adam = Adam::new(&model.store);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let lr = config.schedule.lr(epoch);
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_n) {
            if batch.len() < 2 {
                continue;
            }
            let mut views = Vec::with_capacity(2 * batch.len());
            for &src in batch {
                let pair = sample_pair(&data[src], src, rng.random())?;
                views.push(pair.view_i);
                views.push(pair.view_j);
            }
            let refs: Vec<&MelSpectrogram> = views.iter().collect();
            let (loss, grads) = {
                let mut g = Graph::with_params(&model.store);
                let l = model.batch_loss(&mut g, &refs, config.tau)?;
                let loss = g.scalar(l);
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!("loss became {loss} at step {step}")));
                }
                (loss, g.backward(l)?.for_params(&model.store))
            };
            adam.step(&mut model.store, &grads, lr)?;
            let record = LossRecord {
                step,
                epoch,
                lr,
                loss: loss as f64,
            };
            on_step(&record);
            log.push(record);
            step += 1;
        }
    }
    Ok(log)
}

/// Names of the parameters that belong to the encoder.
pub fn encoder_param_names<T: Real>(store: &ParamStore<T>) -> Vec<String> {
    store
        .iter()
        .filter(|(_, p)| p.name.starts_with("encoder."))
        .map(|(_, p)| p.name.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vgg16_has_thirteen_convolutions() {
        let cfg = EncoderConfig::vgg16(1.0);
        let convs = cfg.conv_stack.iter().filter(|s| matches!(s, Stage::Conv { .. })).count();
        assert_eq!(convs, 13);
        assert_eq!(cfg.feature_shape().unwrap(), (512, 2, 6));
        assert_eq!(EncoderConfig::default().feature_shape().unwrap(), (128, 2, 6));
        assert_eq!(EncoderConfig::reduced(0.25).feature_shape().unwrap(), (32, 4, 12));
    }

    #[test]
    fn oversized_pooling_is_rejected() {
        let mut cfg = EncoderConfig::reduced(0.25);
        cfg.input_shape = (8, 8);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn encoder_shapes_and_determinism() {
        let model = ContrastiveModel::<f32>::new(&EncoderConfig::reduced(0.25), 1).unwrap();
        let mel = MelSpectrogram::new(Tensor::from_fn(&[64, 200], |i| (i % 13) as f32 - 6.0), 1e-10).unwrap();
        let e = model.encode(&mel).unwrap();
        assert_eq!(e.len(), 512);
        assert_eq!(e, model.encode(&mel).unwrap());
        let z = model.project(&e).unwrap();
        assert_eq!(z.len(), 128);
        assert_eq!(z, model.project(&e).unwrap());
        assert!(model.project(&e[..10]).is_err());
        let wrong = MelSpectrogram::constant(64, 100, 0.0);
        assert!(matches!(model.encode(&wrong), Err(Error::Dimension { .. })));
    }

    #[test]
    fn zero_weights_give_zero_embedding() {
        let mut model = ContrastiveModel::<f32>::new(&EncoderConfig::reduced(0.25), 1).unwrap();
        let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            if id != model.encoder.input_norm {
                model.store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let e = model.encode(&MelSpectrogram::constant(64, 200, 0.0)).unwrap();
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn temperature_must_be_positive() {
        let s = Tensor::<f64>::eye(4);
        for tau in [0.1, 0.5, 1.0] {
            assert!(nt_xent_loss(&s, tau).is_ok());
        }
        assert!(matches!(nt_xent_loss(&s, 0.0), Err(Error::Parameter(_))));
        let cfg = ContrastiveRunConfig {
            tau: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn similarity_examples() {
        let z = Tensor::new(&[2, 3], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let s = similarity_matrix::<f64>(&z).unwrap();
        assert!((s.at2(0, 1) - core::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        let z = Tensor::new(&[2, 2], vec![0.3, -0.4, -0.3, 0.4]).unwrap();
        assert!((similarity_matrix::<f64>(&z).unwrap().at2(0, 1) + 1.0).abs() < 1e-12);
        let z = Tensor::new(&[2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        match similarity_matrix::<f64>(&z) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("row 0")),
            other => panic!("expected a numeric error, got {other:?}"),
        }
    }
}
