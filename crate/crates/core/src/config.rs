//! Model and training configuration, presets, and the `key = value` text
//! format used for config files and checkpoint snapshots.
//!
//! A config file is UTF-8 text with one `key = value` pair per line. Blank
//! lines and anything after `#` are ignored. The optional `preset` key picks
//! the base values (`full`, `desk` or `tiny`) before the remaining keys are
//! applied, wherever it appears in the file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Number of mel bins every spectrogram carries.
pub const N_MELS: usize = 80;

/// How the twelve flow steps share their parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowSharing {
    /// Step `k` uses parameter set `k % (steps / groups)`.
    Cyclic,
    /// Steps are split into `groups` consecutive blocks; each block owns one set.
    Blocked,
}

impl FlowSharing {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "cyclic" => Ok(FlowSharing::Cyclic),
            "blocked" => Ok(FlowSharing::Blocked),
            _ => Err(Error::validation(format!("flow_sharing must be cyclic or blocked, got {s:?}"))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            FlowSharing::Cyclic => "cyclic",
            FlowSharing::Blocked => "blocked",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub fft_kernel: usize,
    pub fft_filter: usize,
    pub fft_dropout: f64,
    pub predictor_kernel: usize,
    pub predictor_filter: usize,
    pub predictor_dropout: f64,
    pub n_scales: usize,
    pub pitch_bins: usize,
    pub f0_min: f64,
    pub f0_max: f64,
    pub global_layers: usize,
    pub external_dim: usize,
    pub n_speakers: usize,
    pub n_emotions: usize,
    pub am_margin: f64,
    pub am_scale: f64,
    pub local_conv_layers: usize,
    pub local_wn_layers: usize,
    pub codebook_size: usize,
    pub align_layers: usize,
    pub align_dropout: f64,
    pub align_wn_layers: usize,
    pub flow_steps: usize,
    pub flow_groups: usize,
    pub flow_sharing: FlowSharing,
    pub flow_wn_layers: usize,
    pub flow_kernel: usize,
    pub flow_channels: usize,
    pub squeeze: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixStyleConfig {
    pub alpha: f64,
    pub p: f64,
    pub training: bool,
}

impl MixStyleConfig {
    /// The Beta parameter used in the main model description.
    pub const MAIN: MixStyleConfig = MixStyleConfig { alpha: 0.2, p: 0.2, training: true };
    /// The hyperparameter-table variant.
    pub const TABLE: MixStyleConfig = MixStyleConfig { alpha: 0.1, p: 0.2, training: true };

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::validation(format!("mix_alpha must be > 0, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::validation(format!("mix_prob must lie in [0, 1], got {}", self.p)));
        }
        Ok(())
    }
}

impl Default for MixStyleConfig {
    fn default() -> Self {
        Self::MAIN
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub dur: f64,
    pub mel: f64,
    pub pitch: f64,
    pub postnet: f64,
    pub commit: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { dur: 1.0, mel: 1.0, pitch: 1.0, postnet: 1.0, commit: 0.25 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Steps of constant learning rate before inverse-square-root decay.
    pub lr_hold: u64,
    pub weights: LossWeights,
    /// Weight of `||z_e - sg[e]||^2` inside the VQ loss.
    pub vq_beta: f64,
    pub mix: MixStyleConfig,
    pub seed: u64,
    pub pretrain_steps: u64,
    pub pretrain_lr: f64,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ModelConfig {
    /// Hyperparameters of the full-size architecture.
    pub fn full() -> Self {
        Self {
            vocab_size: 64,
            embed_dim: 192,
            hidden: 256,
            encoder_layers: 4,
            decoder_layers: 4,
            heads: 2,
            fft_kernel: 9,
            fft_filter: 1024,
            fft_dropout: 0.1,
            predictor_kernel: 3,
            predictor_filter: 256,
            predictor_dropout: 0.5,
            n_scales: 10,
            pitch_bins: 256,
            f0_min: 40.0,
            f0_max: 800.0,
            global_layers: 3,
            external_dim: 768,
            n_speakers: 4,
            n_emotions: 3,
            am_margin: 0.2,
            am_scale: 30.0,
            local_conv_layers: 5,
            local_wn_layers: 4,
            codebook_size: 128,
            align_layers: 2,
            align_dropout: 0.5,
            align_wn_layers: 4,
            flow_steps: 12,
            flow_groups: 3,
            flow_sharing: FlowSharing::Cyclic,
            flow_wn_layers: 3,
            flow_kernel: 3,
            flow_channels: 192,
            squeeze: 2,
        }
    }

    /// Halved width and depth for desktop training.
    pub fn desk() -> Self {
        Self {
            embed_dim: 128,
            hidden: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            fft_filter: 512,
            predictor_filter: 128,
            global_layers: 2,
            flow_channels: 96,
            ..Self::full()
        }
    }

    /// Small enough to train the toy corpus to convergence on one core in minutes.
    pub fn tiny() -> Self {
        Self {
            embed_dim: 64,
            hidden: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            fft_kernel: 5,
            fft_filter: 128,
            predictor_filter: 64,
            global_layers: 2,
            local_conv_layers: 3,
            local_wn_layers: 2,
            align_wn_layers: 2,
            flow_channels: 32,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("fft_kernel", self.fft_kernel),
            ("fft_filter", self.fft_filter),
            ("predictor_kernel", self.predictor_kernel),
            ("predictor_filter", self.predictor_filter),
            ("n_scales", self.n_scales),
            ("pitch_bins", self.pitch_bins),
            ("global_layers", self.global_layers),
            ("external_dim", self.external_dim),
            ("n_speakers", self.n_speakers),
            ("n_emotions", self.n_emotions),
            ("local_conv_layers", self.local_conv_layers),
            ("codebook_size", self.codebook_size),
            ("flow_steps", self.flow_steps),
            ("flow_groups", self.flow_groups),
            ("flow_wn_layers", self.flow_wn_layers),
            ("flow_kernel", self.flow_kernel),
            ("flow_channels", self.flow_channels),
            ("squeeze", self.squeeze),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::validation(format!("{name} must be positive")));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::validation(format!(
                "hidden ({}) must be divisible by heads ({})",
                self.hidden, self.heads
            )));
        }
        for (name, k) in [
            ("fft_kernel", self.fft_kernel),
            ("predictor_kernel", self.predictor_kernel),
            ("flow_kernel", self.flow_kernel),
        ] {
            if k % 2 == 0 {
                return Err(Error::validation(format!("{name} must be odd, got {k}")));
            }
        }
        if self.flow_steps % self.flow_groups != 0 {
            return Err(Error::validation(format!(
                "flow_steps ({}) must be divisible by flow_groups ({})",
                self.flow_steps, self.flow_groups
            )));
        }
        if (N_MELS * self.squeeze) % 2 != 0 {
            return Err(Error::validation("squeezed channel count must be even"));
        }
        for (name, r) in [
            ("fft_dropout", self.fft_dropout),
            ("predictor_dropout", self.predictor_dropout),
            ("align_dropout", self.align_dropout),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::validation(format!("{name} must lie in [0, 1), got {r}")));
            }
        }
        if !(self.f0_min > 0.0 && self.f0_max > self.f0_min) {
            return Err(Error::validation("f0 range must satisfy 0 < f0_min < f0_max"));
        }
        Ok(())
    }

    /// Number of distinct flow step parameterizations.
    pub fn flow_unique_steps(&self) -> usize {
        match self.flow_sharing {
            FlowSharing::Cyclic => self.flow_steps / self.flow_groups,
            FlowSharing::Blocked => self.flow_groups,
        }
    }

    /// Parameter set used by flow step `k`.
    pub fn flow_param_index(&self, k: usize) -> usize {
        match self.flow_sharing {
            FlowSharing::Cyclic => k % self.flow_unique_steps(),
            FlowSharing::Blocked => k / (self.flow_steps / self.flow_groups),
        }
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            total_steps: 20_000,
            warmup_steps: 2_000,
            batch_size: 8,
            lr: 1e-3,
            lr_hold: 1_000,
            weights: LossWeights::default(),
            vq_beta: 0.25,
            mix: MixStyleConfig::default(),
            seed: 1,
            pretrain_steps: 300,
            pretrain_lr: 1e-3,
            temperature: 0.8,
        }
    }

    pub fn full() -> Self {
        Self { total_steps: 200_000, warmup_steps: 20_000, batch_size: 64, lr_hold: 4_000, ..Self::desk() }
    }

    pub fn tiny() -> Self {
        Self { total_steps: 2_000, warmup_steps: 200, lr_hold: 2_000, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return Err(Error::validation(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be positive"));
        }
        if !(self.lr > 0.0) || !(self.pretrain_lr > 0.0) {
            return Err(Error::validation("learning rates must be positive"));
        }
        if self.temperature < 0.0 {
            return Err(Error::validation("temperature must be >= 0"));
        }
        let w = &self.weights;
        if [w.dur, w.mel, w.pitch, w.postnet, w.commit, self.vq_beta].iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::validation("loss weights must be finite and non-negative"));
        }
        self.mix.validate()
    }

    /// Learning rate at `step`: constant for `lr_hold` steps, then
    /// `lr * sqrt(lr_hold / step)`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let hold = self.lr_hold.max(1);
        if step < hold {
            self.lr
        } else {
            self.lr * (hold as f64 / step as f64).sqrt()
        }
    }
}

impl Config {
    pub fn preset(name: &str) -> Result<Self> {
        let (model, train) = match name {
            "full" => (ModelConfig::full(), TrainConfig::full()),
            "desk" => (ModelConfig::desk(), TrainConfig::desk()),
            "tiny" => (ModelConfig::tiny(), TrainConfig::tiny()),
            _ => return Err(Error::validation(format!("unknown preset {name:?} (full, desk, tiny)"))),
        };
        Ok(Self { preset: name.to_string(), model, train })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Parses config text. Keys not present keep their preset value.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::validation(format!("config line {}: expected key = value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::validation(format!("config line {}: empty key", i + 1)));
            }
            if pairs.insert(k.to_string(), (i + 1, v.to_string())).is_some() {
                return Err(Error::validation(format!("config line {}: duplicate key {k:?}", i + 1)));
            }
        }
        let preset = pairs.remove("preset").map(|(_, v)| v).unwrap_or_else(|| "desk".to_string());
        let mut cfg = Config::preset(&preset)?;
        for (key, (line, value)) in &pairs {
            cfg.set(key, value).map_err(|e| Error::validation(format!("config line {line}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            if v.parse::<f64>().is_ok_and(|x| !x.is_finite()) {
                return Err(Error::validation(format!("{key} must be finite, got {v:?}")));
            }
            v.parse().map_err(|_| Error::validation(format!("invalid value {v:?} for {key}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                _ => Err(Error::validation(format!("invalid boolean {v:?} for {key}"))),
            }
        }
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "vocab_size" => m.vocab_size = num(key, value)?,
            "embed_dim" => m.embed_dim = num(key, value)?,
            "hidden" => m.hidden = num(key, value)?,
            "encoder_layers" => m.encoder_layers = num(key, value)?,
            "decoder_layers" => m.decoder_layers = num(key, value)?,
            "heads" => m.heads = num(key, value)?,
            "fft_kernel" => m.fft_kernel = num(key, value)?,
            "fft_filter" => m.fft_filter = num(key, value)?,
            "fft_dropout" => m.fft_dropout = num(key, value)?,
            "predictor_kernel" => m.predictor_kernel = num(key, value)?,
            "predictor_filter" => m.predictor_filter = num(key, value)?,
            "predictor_dropout" => m.predictor_dropout = num(key, value)?,
            "n_scales" => m.n_scales = num(key, value)?,
            "pitch_bins" => m.pitch_bins = num(key, value)?,
            "f0_min" => m.f0_min = num(key, value)?,
            "f0_max" => m.f0_max = num(key, value)?,
            "global_layers" => m.global_layers = num(key, value)?,
            "external_dim" => m.external_dim = num(key, value)?,
            "n_speakers" => m.n_speakers = num(key, value)?,
            "n_emotions" => m.n_emotions = num(key, value)?,
            "am_margin" => m.am_margin = num(key, value)?,
            "am_scale" => m.am_scale = num(key, value)?,
            "local_conv_layers" => m.local_conv_layers = num(key, value)?,
            "local_wn_layers" => m.local_wn_layers = num(key, value)?,
            "codebook_size" => m.codebook_size = num(key, value)?,
            "align_layers" => m.align_layers = num(key, value)?,
            "align_dropout" => m.align_dropout = num(key, value)?,
            "align_wn_layers" => m.align_wn_layers = num(key, value)?,
            "flow_steps" => m.flow_steps = num(key, value)?,
            "flow_groups" => m.flow_groups = num(key, value)?,
            "flow_sharing" => m.flow_sharing = FlowSharing::parse(value)?,
            "flow_wn_layers" => m.flow_wn_layers = num(key, value)?,
            "flow_kernel" => m.flow_kernel = num(key, value)?,
            "flow_channels" => m.flow_channels = num(key, value)?,
            "squeeze" => m.squeeze = num(key, value)?,
            "total_steps" => t.total_steps = num(key, value)?,
            "warmup_steps" => t.warmup_steps = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "lr" => t.lr = num(key, value)?,
            "lr_hold" => t.lr_hold = num(key, value)?,
            "w_dur" => t.weights.dur = num(key, value)?,
            "w_mel" => t.weights.mel = num(key, value)?,
            "w_pitch" => t.weights.pitch = num(key, value)?,
            "w_postnet" => t.weights.postnet = num(key, value)?,
            "w_commit" => t.weights.commit = num(key, value)?,
            "vq_beta" => t.vq_beta = num(key, value)?,
            "mix_alpha" => t.mix.alpha = num(key, value)?,
            "mix_prob" => t.mix.p = num(key, value)?,
            "mix_training" => t.mix.training = flag(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "pretrain_steps" => t.pretrain_steps = num(key, value)?,
            "pretrain_lr" => t.pretrain_lr = num(key, value)?,
            "temperature" => t.temperature = num(key, value)?,
            _ => return Err(Error::validation(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Serializes every key so that `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("preset", self.preset.clone());
        kv("vocab_size", m.vocab_size.to_string());
        kv("embed_dim", m.embed_dim.to_string());
        kv("hidden", m.hidden.to_string());
        kv("encoder_layers", m.encoder_layers.to_string());
        kv("decoder_layers", m.decoder_layers.to_string());
        kv("heads", m.heads.to_string());
        kv("fft_kernel", m.fft_kernel.to_string());
        kv("fft_filter", m.fft_filter.to_string());
        kv("fft_dropout", m.fft_dropout.to_string());
        kv("predictor_kernel", m.predictor_kernel.to_string());
        kv("predictor_filter", m.predictor_filter.to_string());
        kv("predictor_dropout", m.predictor_dropout.to_string());
        kv("n_scales", m.n_scales.to_string());
        kv("pitch_bins", m.pitch_bins.to_string());
        kv("f0_min", m.f0_min.to_string());
        kv("f0_max", m.f0_max.to_string());
        kv("global_layers", m.global_layers.to_string());
        kv("external_dim", m.external_dim.to_string());
        kv("n_speakers", m.n_speakers.to_string());
        kv("n_emotions", m.n_emotions.to_string());
        kv("am_margin", m.am_margin.to_string());
        kv("am_scale", m.am_scale.to_string());
        kv("local_conv_layers", m.local_conv_layers.to_string());
        kv("local_wn_layers", m.local_wn_layers.to_string());
        kv("codebook_size", m.codebook_size.to_string());
        kv("align_layers", m.align_layers.to_string());
        kv("align_dropout", m.align_dropout.to_string());
        kv("align_wn_layers", m.align_wn_layers.to_string());
        kv("flow_steps", m.flow_steps.to_string());
        kv("flow_groups", m.flow_groups.to_string());
        kv("flow_sharing", m.flow_sharing.name().to_string());
        kv("flow_wn_layers", m.flow_wn_layers.to_string());
        kv("flow_kernel", m.flow_kernel.to_string());
        kv("flow_channels", m.flow_channels.to_string());
        kv("squeeze", m.squeeze.to_string());
        kv("total_steps", t.total_steps.to_string());
        kv("warmup_steps", t.warmup_steps.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr", t.lr.to_string());
        kv("lr_hold", t.lr_hold.to_string());
        kv("w_dur", t.weights.dur.to_string());
        kv("w_mel", t.weights.mel.to_string());
        kv("w_pitch", t.weights.pitch.to_string());
        kv("w_postnet", t.weights.postnet.to_string());
        kv("w_commit", t.weights.commit.to_string());
        kv("vq_beta", t.vq_beta.to_string());
        kv("mix_alpha", t.mix.alpha.to_string());
        kv("mix_prob", t.mix.p.to_string());
        kv("mix_training", t.mix.training.to_string());
        kv("seed", t.seed.to_string());
        kv("pretrain_steps", t.pretrain_steps.to_string());
        kv("pretrain_lr", t.pretrain_lr.to_string());
        kv("temperature", t.temperature.to_string());
        s
    }
}
