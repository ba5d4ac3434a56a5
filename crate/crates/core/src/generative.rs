//! Next-code prediction: a small causal transformer over token contexts whose
//! flattened output passes through a low-dimensional dense representation
//! before the vocabulary logits.

#[cfg(not(feature = "std"))]
use num_traits::Float;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::TokenSequence;
use crate::error::{Error, Result};
use crate::nn::{seeded, Dense, LayerNorm};
use crate::tensor::{Adam, Graph, LrSchedule, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub context_len: usize,
    pub vocab: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Dense layers in each block's feed-forward part (at least 2).
    pub ffn_layers: usize,
    pub repr_dim: usize,
    pub corrupt_step_fraction: f64,
    pub seed: u64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            context_len: 25,
            vocab: 256,
            embed_dim: 32,
            num_layers: 3,
            num_heads: 8,
            ffn_dim: 128,
            ffn_layers: 3,
            repr_dim: 16,
            corrupt_step_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.context_len,
            self.vocab,
            self.embed_dim,
            self.num_layers,
            self.num_heads,
            self.ffn_dim,
            self.repr_dim,
        ];
        if positive.contains(&0) || self.ffn_layers < 2 {
            return Err(Error::Config(format!("transformer sizes must be positive: {self:?}")));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !(0.0..=1.0).contains(&self.corrupt_step_fraction) {
            return Err(Error::Config("corrupt_step_fraction must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Fixed sinusoidal encoding: even columns `sin(p / 10000^(2i/d))`, odd
/// columns the matching cosine.
pub fn positional_encoding(len: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * dim];
    for p in 0..len {
        for i in 0..dim {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = p as f64 / rate;
            out[p * dim + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    attn_norm: LayerNorm,
    query: Dense,
    key: Dense,
    value: Dense,
    attn_out: Dense,
    ffn_norm: LayerNorm,
    ffn: Vec<Dense>,
}

/// Pre-norm residual blocks: `h += attn(norm(h))`, `h += ffn(norm(h))`.
#[derive(Debug, Clone)]
pub struct CodePredictor<T: Real = f32> {
    pub store: ParamStore<T>,
    pub config: TransformerConfig,
    embedding: ParamId,
    positions: Vec<T>,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    repr: Dense,
    output: Dense,
}

impl<T: Real> CodePredictor<T> {
    pub fn new(config: &TransformerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(config.seed);
        let mut store = ParamStore::new();
        let d = config.embed_dim;
        let embedding = store.add(
            "gen.embedding",
            Tensor::from_fn(&[config.vocab, d], |_| T::lit(rng.random_range(-1.0..1.0) * 0.1)),
        )?;
        let mut blocks = Vec::with_capacity(config.num_layers);
        for b in 0..config.num_layers {
            let p = format!("gen.block{b}");
            let mut ffn = Vec::with_capacity(config.ffn_layers);
            let mut dims = vec![d];
            dims.extend(core::iter::repeat_n(config.ffn_dim, config.ffn_layers - 1));
            dims.push(d);
            for (i, w) in dims.windows(2).enumerate() {
                ffn.push(Dense::new(&mut store, &format!("{p}.ffn{i}"), w[0], w[1], &mut rng)?);
            }
            blocks.push(Block {
                attn_norm: LayerNorm::new(&mut store, &format!("{p}.attn_norm"), d)?,
                query: Dense::new(&mut store, &format!("{p}.query"), d, d, &mut rng)?,
                key: Dense::new(&mut store, &format!("{p}.key"), d, d, &mut rng)?,
                value: Dense::new(&mut store, &format!("{p}.value"), d, d, &mut rng)?,
                attn_out: Dense::new(&mut store, &format!("{p}.attn_out"), d, d, &mut rng)?,
                ffn_norm: LayerNorm::new(&mut store, &format!("{p}.ffn_norm"), d)?,
                ffn,
            });
        }
        let final_norm = LayerNorm::new(&mut store, "gen.final_norm", d)?;
        let repr = Dense::new(&mut store, "gen.repr", config.context_len * d, config.repr_dim, &mut rng)?;
        let output = Dense::new(&mut store, "gen.output", config.repr_dim, config.vocab, &mut rng)?;
        let positions = positional_encoding(config.context_len, d).into_iter().map(T::lit).collect();
        Ok(Self {
            store,
            config: config.clone(),
            embedding,
            positions,
            blocks,
            final_norm,
            repr,
            output,
        })
    }

    fn check_contexts(&self, contexts: &[&[u32]]) -> Result<Vec<usize>> {
        if contexts.is_empty() {
            return Err(Error::Input("no contexts".into()));
        }
        let n = self.config.context_len;
        let mut ids = Vec::with_capacity(contexts.len() * n);
        for c in contexts {
            if c.len() != n {
                return Err(Error::dim("context", &[n], &[c.len()]));
            }
            for &t in *c {
                if t as usize >= self.config.vocab {
                    return Err(Error::Index {
                        context: "context token",
                        index: t as usize,
                        bound: self.config.vocab,
                    });
                }
                ids.push(t as usize);
            }
        }
        Ok(ids)
    }

    /// Per-position outputs of the block stack (after the final norm),
    /// `[batch * context_len, embed_dim]`.
    pub fn forward_blocks(&self, g: &mut Graph<'_, T>, contexts: &[&[u32]]) -> Result<Var> {
        let ids = self.check_contexts(contexts)?;
        let (n, d) = (self.config.context_len, self.config.embed_dim);
        let table = g.param(self.embedding);
        let tokens = g.embedding(table, &ids)?;
        let pos: Vec<T> = (0..contexts.len()).flat_map(|_| self.positions.iter().copied()).collect();
        let pos = g.input(Tensor::new(&[contexts.len() * n, d], pos)?);
        let mut h = g.add(tokens, pos)?;
        for block in &self.blocks {
            let x = block.attn_norm.forward(g, h)?;
            let q = block.query.forward(g, x)?;
            let k = block.key.forward(g, x)?;
            let v = block.value.forward(g, x)?;
            let a = g.causal_attention(q, k, v, self.config.num_heads, n)?;
            let a = block.attn_out.forward(g, a)?;
            h = g.add(h, a)?;
            let mut f = block.ffn_norm.forward(g, h)?;
            for (i, layer) in block.ffn.iter().enumerate() {
                f = layer.forward(g, f)?;
                if i + 1 < block.ffn.len() {
                    f = g.relu(f);
                }
            }
            h = g.add(h, f)?;
        }
        self.final_norm.forward(g, h)
    }

    /// Returns `(logits [batch, vocab], representation [batch, repr_dim])`.
    pub fn forward(&self, g: &mut Graph<'_, T>, contexts: &[&[u32]]) -> Result<(Var, Var)> {
        let h = self.forward_blocks(g, contexts)?;
        let flat = g.reshape(h, &[contexts.len(), self.config.context_len * self.config.embed_dim])?;
        let r = self.repr.forward(g, flat)?;
        let logits = self.output.forward(g, r)?;
        Ok((logits, r))
    }

    /// Inference on a batch of contexts: `(logits, representations)`.
    pub fn infer(&self, contexts: &[&[u32]]) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::with_params(&self.store);
        let (logits, r) = self.forward(&mut g, contexts)?;
        Ok((g.tensor(logits), g.tensor(r)))
    }

    pub fn block_outputs(&self, context: &[u32]) -> Result<Tensor<T>> {
        let mut g = Graph::with_params(&self.store);
        let h = self.forward_blocks(&mut g, &[context])?;
        Ok(g.tensor(h))
    }

    /// Representation of a sequence from its first `context_len` tokens.
    pub fn represent(&self, tokens: &[u32]) -> Result<Vec<T>> {
        let n = self.config.context_len;
        if tokens.len() < n {
            return Err(Error::Input(format!("sequence has {} tokens, needs {n}", tokens.len())));
        }
        Ok(self.infer(&[&tokens[..n]])?.1.into_data())
    }

    /// Representations for many sequences, `[n, repr_dim]`, `chunk` at a time.
    pub fn represent_all(&self, seqs: &[TokenSequence], chunk: usize) -> Result<Tensor<T>> {
        let n = self.config.context_len;
        let mut out = Vec::with_capacity(seqs.len() * self.config.repr_dim);
        for part in seqs.chunks(chunk.max(1)) {
            let mut ctx = Vec::with_capacity(part.len());
            for s in part {
                if s.tokens.len() < n {
                    return Err(Error::Input(format!(
                        "clip {} has {} tokens, needs {n}",
                        s.clip_id,
                        s.tokens.len()
                    )));
                }
                ctx.push(&s.tokens[..n]);
            }
            out.extend_from_slice(self.infer(&ctx)?.1.data());
        }
        Tensor::new(&[seqs.len(), self.config.repr_dim], out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub context: Vec<u32>,
    pub target: u32,
}

/// One example per sequence (`tokens[..n]` predicts `tokens[n]`), or every
/// window of `n + 1` tokens when `sliding` is set.
pub fn training_examples(seqs: &[TokenSequence], context_len: usize, sliding: bool) -> Result<Vec<TrainingExample>> {
    let mut out = Vec::new();
    for s in seqs {
        if s.tokens.len() <= context_len {
            return Err(Error::Input(format!(
                "clip {} has {} tokens, needs {}",
                s.clip_id,
                s.tokens.len(),
                context_len + 1
            )));
        }
        let starts = if sliding { s.tokens.len() - context_len } else { 1 };
        for t in 0..starts {
            out.push(TrainingExample {
                context: s.tokens[t..t + context_len].to_vec(),
                target: s.tokens[t + context_len],
            });
        }
    }
    Ok(out)
}

/// Replaces `c ~ U{1..=len}` distinct, uniformly chosen positions with
/// uniform tokens in `[0, vocab)`. Returns the new context and `c`.
pub fn corrupt_context(context: &[u32], vocab: usize, rng: &mut impl Rng) -> (Vec<u32>, usize) {
    let mut out = context.to_vec();
    if context.is_empty() {
        return (out, 0);
    }
    let c = rng.random_range(1..=context.len());
    for pos in index::sample(rng, context.len(), c) {
        out[pos] = rng.random_range(0..vocab as u32);
    }
    (out, c)
}

/// Decides whether a training step is corrupted (probability `fraction`) and
/// if so corrupts every context of the step independently.
pub fn corrupt_inputs(
    contexts: &[Vec<u32>],
    fraction: f64,
    vocab: usize,
    rng: &mut impl Rng,
) -> (Vec<Vec<u32>>, bool) {
    if rng.random::<f64>() < fraction {
        (contexts.iter().map(|c| corrupt_context(c, vocab, rng).0).collect(), true)
    } else {
        (contexts.to_vec(), false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub sliding_window: bool,
    pub seed: u64,
}

impl Default for GenerativeTraining {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            schedule: LrSchedule::default(),
            sliding_window: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss over the epoch's (possibly corrupted) steps.
    pub loss: f64,
    /// Top-1 next-token accuracy on the uncorrupted training examples at
    /// the end of the epoch.
    pub top1_acc: f64,
}

/// Top-1 accuracy of the model on `examples`; ties go to the lowest token.
pub fn next_token_accuracy<T: Real>(model: &CodePredictor<T>, examples: &[TrainingExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Input("no examples to score".into()));
    }
    let mut correct = 0;
    for part in examples.chunks(128) {
        let ctx: Vec<&[u32]> = part.iter().map(|e| e.context.as_slice()).collect();
        let (logits, _) = model.infer(&ctx)?;
        for (row, e) in logits.data().chunks(model.config.vocab).zip(part) {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            correct += (best == e.target as usize) as usize;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Accuracy on `test` of always predicting the most frequent target of
/// `train` (ties to the lowest token).
pub fn best_constant_accuracy(train: &[TrainingExample], test: &[TrainingExample]) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Input("constant baseline needs training and test examples".into()));
    }
    let vocab = train.iter().map(|e| e.target as usize + 1).max().unwrap_or(1);
    let mut counts = vec![0usize; vocab];
    for e in train {
        counts[e.target as usize] += 1;
    }
    let mut best = 0;
    for (t, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = t;
        }
    }
    Ok(test.iter().filter(|e| e.target as usize == best).count() as f64 / test.len() as f64)
}

/// Minimizes next-token cross-entropy with Adam under the schedule, with
/// step-level input corruption.
pub fn train_generative(
    model: &mut CodePredictor<f32>,
    seqs: &[TokenSequence],
    training: &GenerativeTraining,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    if seqs.is_empty() {
        return Err(Error::Input("generative training needs at least one sequence".into()));
    }
    if training.epochs == 0 || training.batch_size == 0 {
        return Err(Error::Config("generative epochs and batch_size must be positive".into()));
    }
    training.schedule.validate()?;
    let examples = training_examples(seqs, model.config.context_len, training.sliding_window)?;
    let mut rng = seeded(training.seed);
    let mut adam = Adam::new(&model.store);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = Vec::with_capacity(training.epochs);
    for epoch in 0..training.epochs {
        let lr = training.schedule.lr(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(training.batch_size) {
            let clean: Vec<Vec<u32>> = batch.iter().map(|&i| examples[i].context.clone()).collect();
            let (contexts, _) = corrupt_inputs(&clean, model.config.corrupt_step_fraction, model.config.vocab, &mut rng);
            let targets: Vec<usize> = batch.iter().map(|&i| examples[i].target as usize).collect();
            let refs: Vec<&[u32]> = contexts.iter().map(|c| c.as_slice()).collect();
            let (loss, grads) = {
                let mut g = Graph::with_params(&model.store);
                let (logits, _) = model.forward(&mut g, &refs)?;
                let l = g.softmax_cross_entropy(logits, &targets)?;
                (g.scalar(l), g.backward(l)?.for_params(&model.store))
            };
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("generative loss became {loss} in epoch {epoch}")));
            }
            adam.step(&mut model.store, &grads, lr)?;
            total += loss as f64 * batch.len() as f64;
        }
        let record = EpochRecord {
            epoch,
            lr,
            loss: total / examples.len() as f64,
            top1_acc: next_token_accuracy(model, &examples)?,
        };
        on_epoch(&record);
        log.push(record);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heads_must_divide_width() {
        let cfg = TransformerConfig {
            num_heads: 5,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn default_shapes() {
        let model = CodePredictor::<f32>::new(&TransformerConfig::default()).unwrap();
        let ctx: Vec<u32> = (0..25).map(|i| (i * 9) % 256).collect();
        let (logits, r) = model.infer(&[&ctx]).unwrap();
        assert_eq!(logits.shape(), &[1, 256]);
        assert_eq!(r.shape(), &[1, 16]);
        assert_eq!(model.infer(&[&ctx]).unwrap().0, logits);
        assert_eq!(model.represent(&ctx).unwrap(), r.data());
        let bad: Vec<u32> = (0..25).map(|i| if i == 3 { 256 } else { 0 }).collect();
        assert!(matches!(model.infer(&[&bad]), Err(Error::Index { .. })));
        assert!(matches!(model.represent(&ctx[..24]), Err(Error::Input(_))));
    }

    #[test]
    fn literal_and_sliding_examples() {
        let seq = TokenSequence {
            tokens: (0..50).collect(),
            clip_id: 0,
            label: None,
        };
        let lit = training_examples(core::slice::from_ref(&seq), 25, false).unwrap();
        assert_eq!(lit, vec![TrainingExample { context: (0..25).collect(), target: 25 }]);
        let sl = training_examples(&[seq], 25, true).unwrap();
        assert_eq!(sl.len(), 25);
        assert_eq!(sl[24].target, 49);
    }

    #[test]
    fn positional_encoding_first_rows() {
        let pe = positional_encoding(2, 4);
        assert_eq!(&pe[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe[4] - 1f64.sin()).abs() < 1e-15);
        assert!((pe[6] - 0.01f64.sin()).abs() < 1e-15);
    }
}
