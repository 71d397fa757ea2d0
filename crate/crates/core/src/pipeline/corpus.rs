//! Utterance records, the tab-separated manifest format, and a procedural
//! toy corpus.
//!
//! Manifest lines carry eight tab-separated fields (a ninth is optional):
//!
//! ```text
//! id  phoneme ids  durations  word starts  speaker  emotion  pitch.gstn  mel.gstn  [embedding.gstn]
//! ```
//!
//! List fields are space-separated integers. File paths are relative to the
//! manifest's directory unless absolute. Blank lines and lines starting with
//! `#` are skipped.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use melstyle_autograd::{RngStream, Tensor};

use crate::backbone::{MelSpectrogram, PhonemeSequence, Vocabulary};
use crate::config::{ModelConfig, N_MELS};
use crate::error::{Error, Result};
use crate::pitch_cwt::PitchContour;

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub phonemes: PhonemeSequence,
    pub durations: Vec<usize>,
    pub pitch: PitchContour,
    pub mel: MelSpectrogram,
    pub speaker: usize,
    pub emotion: usize,
    /// Optional precomputed global embedding (`[768]` or `[hidden]`).
    pub embedding: Option<Tensor>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.mel.len()
    }

    /// Checks length identities and label ranges.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let id = &self.id;
        if self.durations.len() != self.phonemes.len() {
            return Err(Error::validation(format!(
                "{id}: {} durations for {} phonemes",
                self.durations.len(),
                self.phonemes.len()
            )));
        }
        let total: usize = self.durations.iter().sum();
        if total != self.mel.len() {
            return Err(Error::validation(format!(
                "{id}: durations sum to {total} but the mel has {} frames",
                self.mel.len()
            )));
        }
        if self.pitch.len() != self.mel.len() {
            return Err(Error::validation(format!(
                "{id}: pitch has {} frames but the mel has {}",
                self.pitch.len(),
                self.mel.len()
            )));
        }
        if !self.pitch.f0.iter().any(|&f| f > 0.0) {
            return Err(Error::validation(format!("{id}: pitch contour has no voiced frame")));
        }
        if let Some(&p) = self.phonemes.ids.iter().find(|&&p| p >= cfg.vocab_size) {
            return Err(Error::validation(format!("{id}: unknown phoneme id {p}")));
        }
        if self.speaker >= cfg.n_speakers {
            return Err(Error::validation(format!(
                "{id}: unknown speaker label {} ({} speakers)",
                self.speaker, cfg.n_speakers
            )));
        }
        if self.emotion >= cfg.n_emotions {
            return Err(Error::validation(format!(
                "{id}: unknown emotion label {} ({} emotions)",
                self.emotion, cfg.n_emotions
            )));
        }
        Ok(())
    }
}

/// One parsed manifest line, before any file is read.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub phonemes: Vec<usize>,
    pub durations: Vec<usize>,
    pub word_starts: Vec<usize>,
    pub speaker: usize,
    pub emotion: usize,
    pub pitch_path: String,
    pub mel_path: String,
    pub embedding_path: Option<String>,
}

fn int_list(field: &str, what: &str, line: usize) -> Result<Vec<usize>> {
    field
        .split_whitespace()
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| Error::validation(format!("manifest line {line}: bad {what} entry {t:?}")))
        })
        .collect()
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 8 && fields.len() != 9 {
            return Err(Error::validation(format!(
                "manifest line {line}: expected 8 or 9 tab-separated fields, found {}",
                fields.len()
            )));
        }
        let id = fields[0].trim().to_string();
        if id.is_empty() {
            return Err(Error::validation(format!("manifest line {line}: empty id")));
        }
        let label = |s: &str, what: &str| -> Result<usize> {
            s.trim().parse().map_err(|_| Error::validation(format!("{id}: bad {what} label {s:?}")))
        };
        let path = |s: &str, what: &str| -> Result<String> {
            let s = s.trim();
            if s.is_empty() {
                return Err(Error::validation(format!("{id}: missing {what} file")));
            }
            Ok(s.to_string())
        };
        out.push(ManifestRecord {
            phonemes: int_list(fields[1], "phoneme", line)?,
            durations: int_list(fields[2], "duration", line)?,
            word_starts: int_list(fields[3], "word boundary", line)?,
            speaker: label(fields[4], "speaker")?,
            emotion: label(fields[5], "emotion")?,
            pitch_path: path(fields[6], "pitch")?,
            mel_path: path(fields[7], "mel")?,
            embedding_path: match fields.get(8) {
                Some(s) if !s.trim().is_empty() => Some(s.trim().to_string()),
                _ => None,
            },
            id,
        });
    }
    Ok(out)
}

pub fn manifest_line(r: &ManifestRecord) -> String {
    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
    let mut s = format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        r.id,
        join(&r.phonemes),
        join(&r.durations),
        join(&r.word_starts),
        r.speaker,
        r.emotion,
        r.pitch_path,
        r.mel_path
    );
    if let Some(e) = &r.embedding_path {
        let _ = write!(s, "\t{e}");
    }
    s
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_tensor(id: &str, what: &str, path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, format!("{id}: missing {what} file")),
        ));
    }
    Tensor::load(path).map_err(|e| match e {
        melstyle_autograd::Error::Io { path, source } => Error::Io { path, source },
        other => Error::validation(format!("{id}: {what} file {}: {other}", path.display())),
    })
}

/// Reads the manifest and every referenced file, validating each record.
pub fn ingest_corpus(manifest: impl AsRef<Path>, cfg: &ModelConfig) -> Result<Vec<Utterance>> {
    let manifest = manifest.as_ref();
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let records = parse_manifest(&text)?;
    if records.is_empty() {
        return Err(Error::validation("empty corpus"));
    }
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let mel = load_tensor(&r.id, "mel", &resolve(base, &r.mel_path))?;
        let mel = MelSpectrogram::new(mel).map_err(|e| Error::validation(format!("{}: {e}", r.id)))?;
        let pitch = load_tensor(&r.id, "pitch", &resolve(base, &r.pitch_path))?;
        if pitch.dims().len() != 1 {
            return Err(Error::validation(format!("{}: pitch must be a vector, got {:?}", r.id, pitch.dims())));
        }
        let pitch = PitchContour::new(pitch.into_data()).map_err(|e| Error::validation(format!("{}: {e}", r.id)))?;
        let embedding = match &r.embedding_path {
            Some(p) => Some(load_tensor(&r.id, "embedding", &resolve(base, p))?),
            None => None,
        };
        let phonemes = PhonemeSequence::new(r.phonemes, r.word_starts)
            .map_err(|e| Error::validation(format!("{}: {e}", r.id)))?;
        let u = Utterance {
            id: r.id,
            phonemes,
            durations: r.durations,
            pitch,
            mel,
            speaker: r.speaker,
            emotion: r.emotion,
            embedding,
        };
        u.validate(cfg)?;
        out.push(u);
    }
    Ok(out)
}

/// Writes `manifest.tsv`, `vocab.txt` and per-utterance GSTN files under `dir`.
pub fn write_corpus(dir: impl AsRef<Path>, utts: &[Utterance], vocab: &Vocabulary) -> Result<PathBuf> {
    let dir = dir.as_ref();
    for sub in ["mel", "pitch", "embedding"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = String::new();
    for u in utts {
        let mel_path = format!("mel/{}.gstn", u.id);
        let pitch_path = format!("pitch/{}.gstn", u.id);
        u.mel.frames.save(dir.join(&mel_path))?;
        Tensor::vector(u.pitch.f0.clone()).save(dir.join(&pitch_path))?;
        let embedding_path = match &u.embedding {
            Some(e) => {
                let p = format!("embedding/{}.gstn", u.id);
                e.save(dir.join(&p))?;
                Some(p)
            }
            None => None,
        };
        let rec = ManifestRecord {
            id: u.id.clone(),
            phonemes: u.phonemes.ids.clone(),
            durations: u.durations.clone(),
            word_starts: u.phonemes.word_boundaries.clone(),
            speaker: u.speaker,
            emotion: u.emotion,
            pitch_path,
            mel_path,
            embedding_path,
        };
        manifest.push_str(&manifest_line(&rec));
        manifest.push('\n');
    }
    let path = dir.join("manifest.tsv");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    let vpath = dir.join("vocab.txt");
    std::fs::write(&vpath, vocab.to_text()).map_err(|e| Error::io(&vpath, e))?;
    Ok(path)
}

/// Shape of the procedural corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToySpec {
    pub speakers: usize,
    pub emotions: usize,
    pub texts: usize,
    pub phonemes: usize,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self { speakers: 4, emotions: 3, texts: 16, phonemes: 32 }
    }
}

/// Procedural speech-like data.
///
/// Each phoneme owns a spectral template (a few Gaussian bumps over the mel
/// axis). A speaker shifts the bumps and tilts the spectrum; an emotion
/// changes loudness, tempo and the pitch contour shape. Voiced frames get a
/// pitch band whose position tracks log-F0. Every fifth phoneme is
/// unvoiced. Values stay roughly inside `[-1.5, 1.5]`.
#[derive(Clone, Debug)]
pub struct ToyCorpus {
    pub spec: ToySpec,
    pub vocab: Vocabulary,
    texts: Vec<(Vec<usize>, Vec<usize>, Vec<usize>)>,
    templates: Vec<Vec<(f64, f64, f64)>>,
    seed: u64,
}

const SPEAKER_F0: [f64; 8] = [110.0, 150.0, 200.0, 250.0, 130.0, 175.0, 225.0, 95.0];

impl ToyCorpus {
    pub fn new(spec: ToySpec, seed: u64) -> Result<Self> {
        if spec.speakers == 0 || spec.emotions == 0 || spec.texts == 0 || spec.phonemes < 2 {
            return Err(Error::validation("toy corpus needs speakers, emotions, texts and at least 2 phonemes"));
        }
        let vocab_text: String = (0..spec.phonemes).map(|i| format!("ph{i:02}\n")).collect();
        let vocab = Vocabulary::parse(&vocab_text)?;
        let root = RngStream::new(seed);
        let mut trng = root.derive(1);
        let mut templates = Vec::with_capacity(spec.phonemes);
        for _ in 0..spec.phonemes {
            let bumps = 2 + trng.below(2);
            templates.push(
                (0..bumps)
                    .map(|_| (14.0 + trng.uniform() * 56.0, 2.5 + trng.uniform() * 4.0, 0.8 + trng.uniform() * 0.9))
                    .collect(),
            );
        }
        let mut texts = Vec::with_capacity(spec.texts);
        for _ in 0..spec.texts {
            let words = 3 + trng.below(2);
            let mut ids = Vec::new();
            let mut starts = Vec::new();
            for _ in 0..words {
                starts.push(ids.len());
                for _ in 0..2 + trng.below(2) {
                    ids.push(trng.below(spec.phonemes));
                }
            }
            let base: Vec<usize> = ids.iter().map(|_| 2 + trng.below(3)).collect();
            texts.push((ids, starts, base));
        }
        Ok(Self { spec, vocab, texts, templates, seed })
    }

    pub fn is_voiced(phoneme: usize) -> bool {
        phoneme % 5 != 4
    }

    /// Renders text `text` as spoken by `speaker` with `emotion`.
    pub fn utterance(&self, text: usize, speaker: usize, emotion: usize) -> Result<Utterance> {
        if text >= self.spec.texts || speaker >= self.spec.speakers || emotion >= self.spec.emotions {
            return Err(Error::validation("toy corpus index out of range"));
        }
        let (ids, starts, base) = &self.texts[text];
        let mut rng = RngStream::new(self.seed).derive(((text * 64 + speaker) * 64 + emotion) as u64 + 1000);
        let tempo = [1.0, 0.75, 1.35][emotion % 3] * (0.9 + 0.05 * (speaker % 4) as f64);
        let durations: Vec<usize> = base.iter().map(|&b| ((b as f64 * tempo).round() as usize).max(1)).collect();
        let t: usize = durations.iter().sum();
        let f0_base = SPEAKER_F0[speaker % SPEAKER_F0.len()] * (1.0 + 0.03 * (speaker / SPEAKER_F0.len()) as f64);
        let shift = (speaker as f64 - (self.spec.speakers as f64 - 1.0) / 2.0) * 2.5;
        let tilt = 0.25 * ((speaker % 3) as f64 - 1.0);
        let gain = [0.0, 0.25, -0.25][emotion % 3];
        let mut f0 = vec![0.0; t];
        let mut mel = vec![0.0; t * N_MELS];
        let mut frame = 0;
        for (p, (&ph, &d)) in ids.iter().zip(&durations).enumerate() {
            let voiced = Self::is_voiced(ph);
            let accent = 1.0 + 0.04 * ((ph % 3) as f64 - 1.0);
            for k in 0..d {
                let u = frame as f64 / (t.max(2) - 1) as f64;
                let shape = match emotion % 3 {
                    0 => 1.0 - 0.08 * u,
                    1 => 1.0 + 0.18 * (2.0 * std::f64::consts::PI * (u * 1.5 + p as f64 * 0.07)).sin(),
                    _ => 0.95 - 0.2 * u,
                };
                let hz = if voiced { f0_base * shape * accent * (1.0 + 0.01 * rng.normal()) } else { 0.0 };
                f0[frame] = hz;
                let edge = if k == 0 || k + 1 == d { 0.85 } else { 1.0 };
                let row = &mut mel[frame * N_MELS..(frame + 1) * N_MELS];
                for (bin, v) in row.iter_mut().enumerate() {
                    let x = bin as f64;
                    let mut e = -1.1 + gain + tilt * (x / N_MELS as f64 - 0.5);
                    for &(c, w, a) in &self.templates[ph] {
                        let z = (x - c - shift) / w;
                        e += edge * a * (-0.5 * z * z).exp();
                    }
                    if voiced {
                        let pos = 2.0 + 10.0 * ((hz / 80.0).ln() / (400.0f64 / 80.0).ln());
                        let z = (x - pos) / 1.5;
                        e += 0.9 * (-0.5 * z * z).exp();
                    } else {
                        e += 0.35 * (x / N_MELS as f64);
                    }
                    *v = (e + 0.02 * rng.normal()).clamp(-1.5, 1.5);
                }
                frame += 1;
            }
        }
        Ok(Utterance {
            id: format!("t{text:02}_s{speaker}_e{emotion}"),
            phonemes: PhonemeSequence::new(ids.clone(), starts.clone())?,
            durations,
            pitch: PitchContour::new(f0)?,
            mel: MelSpectrogram::new(Tensor::new(vec![t, N_MELS], mel)?)?,
            speaker,
            emotion,
            embedding: None,
        })
    }

    /// Every text, speaker and emotion combination.
    pub fn full_grid(&self) -> Result<Vec<Utterance>> {
        let mut out = Vec::new();
        for text in 0..self.spec.texts {
            for s in 0..self.spec.speakers {
                for e in 0..self.spec.emotions {
                    out.push(self.utterance(text, s, e)?);
                }
            }
        }
        Ok(out)
    }

    /// One utterance per text: text `i` with speaker `i % speakers` and
    /// emotion `i % emotions`.
    pub fn training_set(&self) -> Result<Vec<Utterance>> {
        (0..self.spec.texts)
            .map(|i| self.utterance(i, i % self.spec.speakers, i % self.spec.emotions))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_line_round_trip() {
        let r = ManifestRecord {
            id: "a".into(),
            phonemes: vec![1, 2, 3],
            durations: vec![2, 0, 1],
            word_starts: vec![0, 2],
            speaker: 1,
            emotion: 2,
            pitch_path: "p.gstn".into(),
            mel_path: "m.gstn".into(),
            embedding_path: Some("e.gstn".into()),
        };
        assert_eq!(parse_manifest(&manifest_line(&r)).unwrap(), vec![r]);
    }

    #[test]
    fn toy_utterances_are_consistent() {
        let toy = ToyCorpus::new(ToySpec::default(), 3).unwrap();
        let cfg = ModelConfig::tiny();
        for u in toy.training_set().unwrap() {
            u.validate(&cfg).unwrap();
            assert!(u.mel.frames.data().iter().all(|v| (-1.5..=1.5).contains(v)));
        }
        assert_eq!(toy.utterance(2, 1, 0).unwrap(), toy.utterance(2, 1, 0).unwrap());
    }
}
