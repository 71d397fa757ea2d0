//! Phoneme encoder and mel decoder: stacks of feed-forward Transformer
//! blocks with sinusoidal positions, plus the vocabulary and the basic
//! sequence containers.

use std::collections::HashMap;
use std::path::Path;

use melstyle_autograd::{ParamId, ParamStore, RngStream, Tensor, Var};

use crate::config::{ModelConfig, N_MELS};
use crate::error::{Error, Result};
use crate::nn::{add_positional, new_param, FftBlock, Fwd, Linear};

/// Phoneme ids of one utterance together with the phoneme index at which
/// each word starts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhonemeSequence {
    pub ids: Vec<usize>,
    pub word_boundaries: Vec<usize>,
}

impl PhonemeSequence {
    pub fn new(ids: Vec<usize>, word_boundaries: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::validation("phoneme sequence is empty"));
        }
        if word_boundaries.first() != Some(&0) {
            return Err(Error::validation("word boundaries must start at 0"));
        }
        for w in word_boundaries.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::validation(format!(
                    "word boundaries must be strictly increasing ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        if let Some(&last) = word_boundaries.last() {
            if last >= ids.len() {
                return Err(Error::validation(format!(
                    "word boundary {last} outside {} phonemes",
                    ids.len()
                )));
            }
        }
        Ok(Self { ids, word_boundaries })
    }

    /// Every phoneme is its own word.
    pub fn single_words(ids: Vec<usize>) -> Result<Self> {
        let b = (0..ids.len()).collect();
        Self::new(ids, b)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Log-amplitude mel frames, `[T, 80]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Tensor,
}

impl MelSpectrogram {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.dims().len() != 2 || frames.dims()[1] != N_MELS {
            return Err(Error::validation(format!("mel must be [T, {N_MELS}], got {:?}", frames.dims())));
        }
        if !frames.is_finite() {
            return Err(Error::validation("mel contains non-finite values"));
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }
}

/// Closed phoneme inventory: one symbol per line, the line number is the id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn parse(text: &str) -> Result<Self> {
        let mut symbols = Vec::new();
        let mut index = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let sym = line.trim_end_matches('\r');
            if sym.is_empty() || sym.chars().any(char::is_whitespace) {
                return Err(Error::validation(format!("vocabulary line {}: invalid symbol {sym:?}", i + 1)));
            }
            if index.insert(sym.to_string(), i).is_some() {
                return Err(Error::validation(format!("vocabulary line {}: duplicate symbol {sym:?}", i + 1)));
            }
            symbols.push(sym.to_string());
        }
        if symbols.is_empty() {
            return Err(Error::validation("vocabulary is empty"));
        }
        Ok(Self { symbols, index })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.symbols.iter().map(|s| format!("{s}\n")).collect()
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    /// Maps whitespace-separated symbols to ids.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|s| self.id(s).ok_or_else(|| Error::validation(format!("unknown phoneme symbol {s:?}"))))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct PhonemeEncoder {
    pub embedding: ParamId,
    pub proj: Option<Linear>,
    pub blocks: Vec<FftBlock>,
    vocab_size: usize,
}

impl PhonemeEncoder {
    pub fn new(ps: &mut ParamStore, rng: &mut RngStream, cfg: &ModelConfig) -> Result<Self> {
        let n = cfg.vocab_size * cfg.embed_dim;
        let std = (1.0 / cfg.embed_dim as f64).sqrt();
        let table = Tensor::new(vec![cfg.vocab_size, cfg.embed_dim], (0..n).map(|_| rng.normal() * std).collect())?;
        let embedding = new_param(ps, "encoder.embedding", table)?;
        let proj = if cfg.embed_dim != cfg.hidden {
            Some(Linear::new(ps, rng, "encoder.embed_proj", cfg.embed_dim, cfg.hidden, true)?)
        } else {
            None
        };
        let blocks = (0..cfg.encoder_layers)
            .map(|l| {
                FftBlock::new(
                    ps,
                    rng,
                    &format!("encoder.block{l}"),
                    cfg.hidden,
                    cfg.heads,
                    cfg.fft_kernel,
                    cfg.fft_filter,
                    cfg.fft_dropout,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { embedding, proj, blocks, vocab_size: cfg.vocab_size })
    }

    /// `[L, hidden]` hidden states for `ids`.
    pub fn encode(&self, f: &mut Fwd, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::validation("phoneme sequence is empty"));
        }
        if let Some(pos) = ids.iter().position(|&i| i >= self.vocab_size) {
            return Err(Error::validation(format!(
                "unknown phoneme id {} at index {pos} (vocabulary size {})",
                ids[pos], self.vocab_size
            )));
        }
        let table = f.p(self.embedding);
        let mut x = f.g.gather_rows(table, ids)?;
        if let Some(p) = &self.proj {
            x = p.forward(f, x)?;
        }
        x = add_positional(f, x)?;
        for b in &self.blocks {
            x = b.forward(f, x)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct MelDecoder {
    pub blocks: Vec<FftBlock>,
    pub out: Linear,
}

impl MelDecoder {
    pub fn new(ps: &mut ParamStore, rng: &mut RngStream, cfg: &ModelConfig) -> Result<Self> {
        let blocks = (0..cfg.decoder_layers)
            .map(|l| {
                FftBlock::new(
                    ps,
                    rng,
                    &format!("decoder.block{l}"),
                    cfg.hidden,
                    cfg.heads,
                    cfg.fft_kernel,
                    cfg.fft_filter,
                    cfg.fft_dropout,
                )
            })
            .collect::<Result<_>>()?;
        let out = Linear::new(ps, rng, "decoder.out", cfg.hidden, N_MELS, true)?;
        Ok(Self { blocks, out })
    }

    /// Frame-level hidden states `[T, hidden]` to a coarse mel `[T, 80]`.
    pub fn decode(&self, f: &mut Fwd, h: Var) -> Result<Var> {
        let mut x = add_positional(f, h)?;
        for b in &self.blocks {
            x = b.forward(f, x)?;
        }
        self.out.forward(f, x)
    }
}
