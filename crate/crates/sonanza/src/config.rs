//! `key = value` run configuration. Every tunable has a typed entry in
//! [`KEYS`]; unknown keys and unparsable values are validation errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sonanza_core::codebook::{AutoencoderConfig, AutoencoderTraining, BOTTLENECK_DIM, PATCH_FRAMES};
use sonanza_core::contrastive::{ContrastiveRunConfig, EncoderConfig};
use sonanza_core::dsp::DOWN_MELS;
use sonanza_core::generative::{GenerativeTraining, TransformerConfig};
use sonanza_core::probe::{BaselineConfig, ProbeConfig};
use sonanza_core::synthetic::SyntheticSpec;
use sonanza_core::tensor::LrSchedule;

use crate::error::{Error, Result};

pub const ECHO_FILE: &str = "config.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Uint,
    Float,
    Bool,
    /// Two comma-separated floats, `lo,hi`.
    Range,
    Text,
    Choice(&'static [&'static str]),
}

pub struct Key {
    pub name: &'static str,
    pub kind: Kind,
    pub default: &'static str,
    pub help: &'static str,
}

const ENCODERS: &[&str] = &["vgg16", "reduced"];

macro_rules! keys {
    ($($name:literal $kind:expr, $default:literal, $help:literal;)*) => {
        pub const KEYS: &[Key] = &[$(Key { name: $name, kind: $kind, default: $default, help: $help }),*];
    };
}

keys! {
    "seed" Kind::Uint, "7", "seed for every random stream of the run";
    "out" Kind::Text, "", "output directory (the --out flag wins)";
    "synthetic.num_classes" Kind::Uint, "3", "tone / band noise / chirp families, in that order";
    "synthetic.clips_per_class" Kind::Uint, "100", "clips per class";
    "synthetic.num_folds" Kind::Uint, "5", "round-robin folds";
    "synthetic.tone_hz" Kind::Range, "200,2000", "tone frequency range";
    "synthetic.noise_low_hz" Kind::Range, "2500,5000", "lower band edge range of noise clips";
    "synthetic.noise_width_hz" Kind::Range, "500,2500", "bandwidth range of noise clips";
    "synthetic.chirp_start_hz" Kind::Range, "200,1000", "chirp start frequency range";
    "synthetic.chirp_end_hz" Kind::Range, "3000,7000", "chirp end frequency range";
    "synthetic.amplitude" Kind::Range, "0.3,0.8", "peak amplitude range";
    "synthetic.background" Kind::Float, "0.003", "white background noise sigma";
    "contrastive.encoder" Kind::Choice(ENCODERS), "vgg16", "encoder conv stack";
    "contrastive.width" Kind::Float, "0.25", "channel width multiplier";
    "contrastive.tau" Kind::Float, "0.5", "NT-Xent temperature";
    "contrastive.batch" Kind::Uint, "32", "source clips per batch (2N views)";
    "contrastive.epochs" Kind::Uint, "50", "training epochs";
    "contrastive.lr" Kind::Float, "1e-3", "Adam learning rate";
    "contrastive.lr_decay" Kind::Float, "1", "learning-rate factor per decay step";
    "contrastive.lr_decay_every" Kind::Uint, "20", "epochs between decay steps";
    "ae.hidden_dim" Kind::Uint, "1024", "autoencoder hidden width";
    "ae.hidden_layers" Kind::Uint, "3", "hidden layers per encoder/decoder stack";
    "ae.epochs" Kind::Uint, "50", "autoencoder epochs";
    "ae.batch" Kind::Uint, "128", "autoencoder minibatch";
    "ae.lr" Kind::Float, "1e-4", "autoencoder learning rate";
    "ae.lr_decay" Kind::Float, "0.1", "learning-rate factor per decay step";
    "ae.lr_decay_every" Kind::Uint, "20", "epochs between decay steps";
    "ae.max_patches" Kind::Uint, "0", "patch subsample per training run (0 = all)";
    "codebook.k" Kind::Uint, "256", "dictionary size, also the transformer vocabulary";
    "codebook.max_iters" Kind::Uint, "300", "Lloyd iteration cap";
    "gen.embed_dim" Kind::Uint, "32", "token embedding width";
    "gen.layers" Kind::Uint, "3", "transformer blocks";
    "gen.heads" Kind::Uint, "8", "attention heads";
    "gen.ffn_dim" Kind::Uint, "128", "feed-forward width";
    "gen.ffn_layers" Kind::Uint, "3", "feed-forward layers per block";
    "gen.repr_dim" Kind::Uint, "16", "representation width";
    "gen.corrupt_fraction" Kind::Float, "0.2", "fraction of steps with corrupted contexts";
    "gen.epochs" Kind::Uint, "50", "transformer epochs";
    "gen.batch" Kind::Uint, "16", "transformer minibatch";
    "gen.lr" Kind::Float, "1e-4", "transformer learning rate";
    "gen.lr_decay" Kind::Float, "0.1", "learning-rate factor per decay step";
    "gen.lr_decay_every" Kind::Uint, "20", "epochs between decay steps";
    "gen.sliding" Kind::Bool, "false", "every 26-token window instead of one example per clip";
    "gen.heldout_fold" Kind::Uint, "0", "fold kept out of transformer training (0 = highest fold)";
    "probe.epochs" Kind::Uint, "100", "linear probe epochs";
    "probe.lr" Kind::Float, "1e-2", "linear probe learning rate";
    "probe.weight_decay" Kind::Float, "1e-4", "L2 coefficient";
    "probe.batch" Kind::Uint, "32", "linear probe minibatch";
    "baseline.encoder" Kind::Choice(ENCODERS), "reduced", "supervised baseline conv stack";
    "baseline.width" Kind::Float, "0.25", "baseline channel width multiplier";
    "baseline.epochs" Kind::Uint, "20", "baseline epochs per fold";
    "baseline.batch" Kind::Uint, "32", "baseline minibatch";
    "baseline.lr" Kind::Float, "1e-3", "baseline learning rate";
}

fn key(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

fn check(k: &Key, value: &str) -> Result<()> {
    let bad = |why: &str| Err(Error::Validation(format!("{} = {value:?}: {why}", k.name)));
    match k.kind {
        Kind::Uint => {
            if value.parse::<u64>().is_err() {
                return bad("expected a non-negative integer");
            }
        }
        Kind::Float => match value.parse::<f64>() {
            Ok(v) if v.is_finite() => {}
            _ => return bad("expected a finite number"),
        },
        Kind::Bool => {
            if !matches!(value, "true" | "false") {
                return bad("expected true or false");
            }
        }
        Kind::Range => {
            if parse_range(value).is_none() {
                return bad("expected lo,hi");
            }
        }
        Kind::Text => {}
        Kind::Choice(options) => {
            if !options.contains(&value) {
                return bad(&format!("expected one of {}", options.join(", ")));
            }
        }
    }
    Ok(())
}

fn parse_range(value: &str) -> Option<(f64, f64)> {
    let (a, b) = value.split_once(',')?;
    let (a, b) = (a.trim().parse::<f64>().ok()?, b.trim().parse::<f64>().ok()?);
    (a.is_finite() && b.is_finite()).then_some((a, b))
}

/// Resolved values for every key; defaults fill whatever was not set.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|k| (k.name, k.default.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        let k = key(name).ok_or_else(|| Error::Validation(format!("unknown configuration key {name:?}")))?;
        let value = value.trim();
        check(k, value)?;
        self.values.insert(k.name, value.to_string());
        Ok(())
    }

    /// Applies `key=value`.
    pub fn set_pair(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Validation(format!("expected key=value, got {assignment:?}")))?;
        self.set(k.trim(), v)
    }

    /// Parses a config file body; `#` starts a comment, blank lines are
    /// skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_pair(line)
                .map_err(|e| Error::Validation(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn get(&self, name: &str) -> &str {
        self.values
            .get(name)
            .unwrap_or_else(|| panic!("configuration key {name} is not declared"))
    }

    pub fn uint(&self, name: &str) -> usize {
        self.get(name).parse().expect("validated on set")
    }

    pub fn u64(&self, name: &str) -> u64 {
        self.get(name).parse().expect("validated on set")
    }

    pub fn float(&self, name: &str) -> f64 {
        self.get(name).parse().expect("validated on set")
    }

    pub fn flag(&self, name: &str) -> bool {
        self.get(name) == "true"
    }

    pub fn range(&self, name: &str) -> (f64, f64) {
        parse_range(self.get(name)).expect("validated on set")
    }

    pub fn seed(&self) -> u64 {
        self.u64("seed")
    }

    /// Every key in declaration order, one `key = value` per line.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{} = {}", k.name, self.get(k.name));
        }
        out
    }

    pub fn write_echo(&self, dir: &Path) -> Result<()> {
        crate::tensor_file::write_atomic(&dir.join(ECHO_FILE), self.echo().as_bytes())
    }

    fn schedule(&self, prefix: &str, epochs: usize) -> LrSchedule {
        LrSchedule {
            base_lr: self.float(&format!("{prefix}.lr")),
            decay_factor: self.float(&format!("{prefix}.lr_decay")),
            decay_every: self.uint(&format!("{prefix}.lr_decay_every")),
            total_epochs: epochs,
        }
    }

    fn encoder(&self, prefix: &str) -> EncoderConfig {
        let width = self.float(&format!("{prefix}.width"));
        match self.get(&format!("{prefix}.encoder")) {
            "vgg16" => EncoderConfig::vgg16(width),
            _ => EncoderConfig::reduced(width),
        }
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.uint("synthetic.num_classes"),
            clips_per_class: self.uint("synthetic.clips_per_class"),
            num_folds: self.uint("synthetic.num_folds"),
            seed: self.seed(),
            tone_hz: self.range("synthetic.tone_hz"),
            noise_low_hz: self.range("synthetic.noise_low_hz"),
            noise_width_hz: self.range("synthetic.noise_width_hz"),
            chirp_start_hz: self.range("synthetic.chirp_start_hz"),
            chirp_end_hz: self.range("synthetic.chirp_end_hz"),
            amplitude: self.range("synthetic.amplitude"),
            background: self.float("synthetic.background"),
        }
    }

    pub fn contrastive_encoder(&self) -> EncoderConfig {
        self.encoder("contrastive")
    }

    pub fn contrastive_run(&self) -> ContrastiveRunConfig {
        let epochs = self.uint("contrastive.epochs");
        ContrastiveRunConfig {
            tau: self.float("contrastive.tau"),
            batch_n: self.uint("contrastive.batch"),
            epochs,
            schedule: self.schedule("contrastive", epochs),
            seed: self.seed(),
        }
    }

    pub fn autoencoder(&self) -> AutoencoderConfig {
        AutoencoderConfig {
            input_dim: DOWN_MELS * PATCH_FRAMES,
            hidden_dim: self.uint("ae.hidden_dim"),
            hidden_layers: self.uint("ae.hidden_layers"),
            bottleneck_dim: BOTTLENECK_DIM,
        }
    }

    pub fn autoencoder_training(&self) -> AutoencoderTraining {
        let epochs = self.uint("ae.epochs");
        let max = self.uint("ae.max_patches");
        AutoencoderTraining {
            epochs,
            batch_size: self.uint("ae.batch"),
            schedule: self.schedule("ae", epochs),
            max_patches: (max > 0).then_some(max),
            seed: self.seed(),
        }
    }

    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            vocab: self.uint("codebook.k"),
            embed_dim: self.uint("gen.embed_dim"),
            num_layers: self.uint("gen.layers"),
            num_heads: self.uint("gen.heads"),
            ffn_dim: self.uint("gen.ffn_dim"),
            ffn_layers: self.uint("gen.ffn_layers"),
            repr_dim: self.uint("gen.repr_dim"),
            corrupt_step_fraction: self.float("gen.corrupt_fraction"),
            seed: self.seed(),
            ..TransformerConfig::default()
        }
    }

    pub fn generative_training(&self) -> GenerativeTraining {
        let epochs = self.uint("gen.epochs");
        GenerativeTraining {
            epochs,
            batch_size: self.uint("gen.batch"),
            schedule: self.schedule("gen", epochs),
            sliding_window: self.flag("gen.sliding"),
            seed: self.seed(),
        }
    }

    pub fn probe(&self) -> ProbeConfig {
        ProbeConfig {
            epochs: self.uint("probe.epochs"),
            learning_rate: self.float("probe.lr"),
            weight_decay: self.float("probe.weight_decay"),
            batch_size: self.uint("probe.batch"),
            seed: self.seed(),
        }
    }

    pub fn baseline(&self) -> BaselineConfig {
        let epochs = self.uint("baseline.epochs");
        BaselineConfig {
            encoder: self.encoder("baseline"),
            epochs,
            batch_size: self.uint("baseline.batch"),
            schedule: LrSchedule::constant(self.float("baseline.lr"), epochs),
            seed: self.seed(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_echo_round_trips() {
        for k in KEYS {
            check(k, k.default).unwrap_or_else(|e| panic!("{e}"));
        }
        let mut cfg = RunConfig::default();
        cfg.set_pair("contrastive.tau = 0.1").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.echo(), "echo").unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set("contrastive.temp", "1"), Err(Error::Validation(_))));
        assert!(cfg.set("seed", "-1").is_err());
        assert!(cfg.set("gen.sliding", "yes").is_err());
        assert!(cfg.set("contrastive.encoder", "resnet").is_err());
        let e = cfg.apply_text("# comment\nseed = 3\nbogus = 1\n", "f").unwrap_err();
        assert!(e.to_string().contains("f:3"), "{e}");
        assert_eq!(cfg.seed(), 3);
    }

    #[test]
    fn typed_views_follow_keys() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("codebook.k = 64\ngen.heldout_fold = 2\nae.max_patches = 10", "t").unwrap();
        assert_eq!(cfg.transformer().vocab, 64);
        assert_eq!(cfg.transformer().context_len, 25);
        assert_eq!(cfg.autoencoder_training().max_patches, Some(10));
        assert_eq!(cfg.synthetic(), SyntheticSpec::default());
        assert_eq!(cfg.probe(), ProbeConfig { seed: 7, ..ProbeConfig::default() });
    }
}
