//! Style adaptor: global speaker/emotion embeddings, frame/phoneme/word
//! local style encoders with vector-quantized outputs, and the attention
//! that aligns style sequences to frame-level content.

use melstyle_autograd::{Graph, ParamId, ParamStore, RngStream, Tensor, Var};

use crate::backbone::MelSpectrogram;
use crate::config::{ModelConfig, N_MELS};
use crate::error::{Error, Result};
use crate::nn::{add_positional, cross_attention, new_param, ConvStack, Fwd, Linear, WaveNet};

/// Speaker and emotion embeddings of one reference.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalStyle {
    pub speaker: Vec<f64>,
    pub emotion: Vec<f64>,
}

impl GlobalStyle {
    /// `G_s + G_e`, the vector that conditions normalization and the decoder.
    pub fn style_vector(&self) -> Vec<f64> {
        self.speaker.iter().zip(&self.emotion).map(|(a, b)| a + b).collect()
    }
}

#[derive(Clone, Debug)]
pub struct GlobalEncoder {
    pub convs: ConvStack,
    pub head_speaker: Linear,
    pub head_emotion: Linear,
    pub external: Linear,
    pub speaker_classes: ParamId,
    pub emotion_classes: ParamId,
    hidden: usize,
    external_dim: usize,
}

impl GlobalEncoder {
    pub fn new(ps: &mut ParamStore, rng: &mut RngStream, cfg: &ModelConfig) -> Result<Self> {
        let h = cfg.hidden;
        let convs = ConvStack::new(ps, rng, "global.convs", N_MELS, h, cfg.global_layers, 3, 0.0)?;
        let head_speaker = Linear::new(ps, rng, "global.speaker", h, h, true)?;
        let head_emotion = Linear::new(ps, rng, "global.emotion", h, h, true)?;
        let external = Linear::new(ps, rng, "global.external", cfg.external_dim, h, true)?;
        let classes = |ps: &mut ParamStore, rng: &mut RngStream, name: &str, n: usize| {
            let data = (0..n * h).map(|_| rng.normal()).collect();
            new_param(ps, name, Tensor::new(vec![n, h], data)?)
        };
        let speaker_classes = classes(ps, rng, "global.speaker_classes", cfg.n_speakers)?;
        let emotion_classes = classes(ps, rng, "global.emotion_classes", cfg.n_emotions)?;
        Ok(Self {
            convs,
            head_speaker,
            head_emotion,
            external,
            speaker_classes,
            emotion_classes,
            hidden: h,
            external_dim: cfg.external_dim,
        })
    }

    /// `(G_s, G_e)`, each `[1, hidden]`, from mel frames `[T, 80]`.
    pub fn forward(&self, f: &mut Fwd, mel: Var) -> Result<(Var, Var)> {
        let h = self.convs.forward(f, mel)?;
        let pooled = f.g.mean_rows(h)?;
        let pooled = f.g.reshape(pooled, &[1, self.hidden])?;
        let s = self.head_speaker.forward(f, pooled)?;
        let e = self.head_emotion.forward(f, pooled)?;
        Ok((s, e))
    }

    /// Inference-mode embedding of a reference mel.
    pub fn encode(&self, store: &ParamStore, mel: &MelSpectrogram) -> Result<GlobalStyle> {
        let mut g = Graph::new(false);
        let mut f = Fwd::new(&mut g, store, RngStream::new(0));
        let m = f.g.constant(mel.frames.clone());
        let (s, e) = self.forward(&mut f, m)?;
        Ok(GlobalStyle { speaker: f.value(s).data().to_vec(), emotion: f.value(e).data().to_vec() })
    }

    /// Global style from a precomputed embedding. A vector of the external
    /// width passes through the learned projection; a hidden-width vector is
    /// used as is. Either way it becomes the speaker embedding and the
    /// emotion embedding is zero.
    pub fn from_external(&self, store: &ParamStore, emb: &Tensor) -> Result<GlobalStyle> {
        let n = emb.len();
        let speaker = if emb.dims() == [self.external_dim] {
            let mut g = Graph::new(false);
            let mut f = Fwd::new(&mut g, store, RngStream::new(0));
            let x = f.g.constant(emb.clone().reshape(&[1, n])?);
            let y = self.external.forward(&mut f, x)?;
            f.value(y).data().to_vec()
        } else if emb.dims() == [self.hidden] {
            emb.data().to_vec()
        } else {
            return Err(Error::validation(format!(
                "external embedding must have shape [{}] or [{}], got {:?}",
                self.external_dim,
                self.hidden,
                emb.dims()
            )));
        };
        if speaker.iter().any(|x| !x.is_finite()) {
            return Err(Error::validation("external embedding contains non-finite values"));
        }
        Ok(GlobalStyle { speaker, emotion: vec![0.0; self.hidden] })
    }
}

/// Additive-margin softmax over cosine similarities:
/// `-mean_b log softmax(s * (cos - m * onehot(y_b)))[y_b]`.
pub fn am_softmax_loss(
    g: &mut Graph,
    embeddings: Var,
    labels: &[usize],
    classes: Var,
    margin: f64,
    scale: f64,
) -> Result<Var> {
    let (b, c) = (g.dims(embeddings)[0], g.dims(classes)[0]);
    if labels.len() != b {
        return Err(Error::validation(format!("{} labels for {b} embeddings", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::validation(format!("label {bad} outside {c} classes")));
    }
    let e = g.normalize_rows(embeddings)?;
    let w = g.normalize_rows(classes)?;
    let cos = g.matmul_t(e, false, w, true)?;
    let mut onehot = vec![0.0; b * c];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * c + y] = 1.0;
    }
    let onehot = g.constant(Tensor::new(vec![b, c], onehot)?);
    let shift = g.scale(onehot, margin)?;
    let logits = g.sub(cos, shift)?;
    let logits = g.scale(logits, scale)?;
    let lsm = g.log_softmax(logits)?;
    let picked = g.mul(lsm, onehot)?;
    let total = g.sum(picked)?;
    Ok(g.scale(total, -1.0 / b as f64)?)
}

/// Checks segment starts: first 0, strictly increasing, all below `t`.
pub fn validate_boundaries(boundaries: &[usize], t: usize) -> Result<()> {
    if boundaries.first() != Some(&0) {
        return Err(Error::validation("boundaries must start at 0"));
    }
    for w in boundaries.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::validation(format!(
                "boundaries must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
    }
    if let Some(&last) = boundaries.last() {
        if last >= t {
            return Err(Error::validation(format!("boundary {last} outside {t} frames")));
        }
    }
    Ok(())
}

/// Mean of `seq` rows inside each segment `[b_n, b_{n+1})`.
pub fn pool_by_boundaries(g: &mut Graph, seq: Var, boundaries: &[usize]) -> Result<Var> {
    validate_boundaries(boundaries, g.dims(seq)[0])?;
    Ok(g.segment_mean(seq, boundaries)?)
}

/// Lengths of the segments that start at `starts` and tile `0..t`.
pub fn segment_lengths(starts: &[usize], t: usize) -> Vec<usize> {
    starts.iter().enumerate().map(|(i, &s)| starts.get(i + 1).copied().unwrap_or(t) - s).collect()
}

/// Frame index at which each phoneme with a positive duration starts.
pub fn phoneme_frame_starts(durations: &[usize]) -> Vec<usize> {
    let mut starts = Vec::with_capacity(durations.len());
    let mut acc = 0;
    for &d in durations {
        if d > 0 {
            starts.push(acc);
        }
        acc += d;
    }
    starts
}

/// Frame index at which each word with a positive length starts.
pub fn word_frame_starts(durations: &[usize], word_boundaries: &[usize]) -> Vec<usize> {
    let mut cum = Vec::with_capacity(durations.len() + 1);
    cum.push(0);
    for &d in durations {
        cum.push(cum.last().unwrap() + d);
    }
    let total = *cum.last().unwrap();
    let mut starts: Vec<usize> = Vec::with_capacity(word_boundaries.len());
    for &w in word_boundaries {
        let s = cum[w.min(durations.len())];
        if s < total && starts.last() != Some(&s) {
            starts.push(s);
        }
    }
    if starts.first() != Some(&0) && total > 0 {
        starts.insert(0, 0);
    }
    starts
}

/// Brute-force nearest codebook row for every row of `z`; ties go to the
/// lowest index.
pub fn nearest_codes(z: &Tensor, codebook: &Tensor) -> Result<Vec<usize>> {
    if codebook.rows() == 0 {
        return Err(Error::validation("codebook is empty"));
    }
    if z.cols() != codebook.cols() {
        return Err(Error::validation(format!(
            "code dimension mismatch: inputs {:?}, codebook {:?}",
            z.dims(),
            codebook.dims()
        )));
    }
    let mut out = Vec::with_capacity(z.rows());
    for n in 0..z.rows() {
        let row = z.row(n);
        let mut best = (0, f64::INFINITY);
        for k in 0..codebook.rows() {
            let d: f64 = row.iter().zip(codebook.row(k)).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        out.push(best.0);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct VqOutput {
    /// Quantized rows; the backward pass hands their gradient to `z_e`.
    pub z_q: Var,
    pub indices: Vec<usize>,
    /// `mean ||sg[z_e] - e||^2 + beta * mean ||z_e - sg[e]||^2`.
    pub loss: Var,
    /// The commitment part alone, `mean ||z_e - sg[e]||^2`.
    pub commitment: Var,
}

pub fn vq_quantize(g: &mut Graph, z_e: Var, codebook: Var, beta: f64) -> Result<VqOutput> {
    let indices = nearest_codes(g.value(z_e), g.value(codebook))?;
    let e = g.gather_rows(codebook, &indices)?;
    let ze_const = g.detach(z_e);
    let e_const = g.detach(e);
    let d = g.sub(ze_const, e)?;
    let d = g.square(d)?;
    let codebook_term = g.mean(d)?;
    let d = g.sub(z_e, e_const)?;
    let d = g.square(d)?;
    let commitment = g.mean(d)?;
    let weighted = g.scale(commitment, beta)?;
    let loss = g.add(codebook_term, weighted)?;
    let value = g.value(e).clone();
    let z_q = g.straight_through(z_e, value)?;
    Ok(VqOutput { z_q, indices, loss, commitment })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StyleLevel {
    Frame,
    Phoneme,
    Word,
}

impl StyleLevel {
    pub const ALL: [StyleLevel; 3] = [StyleLevel::Frame, StyleLevel::Phoneme, StyleLevel::Word];

    pub fn name(self) -> &'static str {
        match self {
            StyleLevel::Frame => "frame",
            StyleLevel::Phoneme => "phoneme",
            StyleLevel::Word => "word",
        }
    }
}

/// Output of one local encoder: the (pooled) pre-quantization sequence and,
/// when quantization ran, its result.
#[derive(Clone, Debug)]
pub struct LocalOutput {
    pub pre_vq: Var,
    pub vq: Option<VqOutput>,
}

impl LocalOutput {
    pub fn style(&self) -> Var {
        self.vq.as_ref().map_or(self.pre_vq, |v| v.z_q)
    }
}

#[derive(Clone, Debug)]
pub struct LocalStyleEncoder {
    pub level: StyleLevel,
    pub convs: ConvStack,
    pub wn: WaveNet,
    pub proj: Linear,
    pub codebook: ParamId,
}

impl LocalStyleEncoder {
    pub fn new(ps: &mut ParamStore, rng: &mut RngStream, cfg: &ModelConfig, level: StyleLevel) -> Result<Self> {
        let name = format!("local.{}", level.name());
        let h = cfg.hidden;
        let convs = ConvStack::new(ps, rng, &format!("{name}.convs"), N_MELS, h, cfg.local_conv_layers, 3, 0.0)?;
        let wn = WaveNet::new(ps, rng, &format!("{name}.wn"), h, cfg.local_wn_layers, 3, None)?;
        let proj = Linear::new(ps, rng, &format!("{name}.proj"), h, h, true)?;
        let data = (0..cfg.codebook_size * h).map(|_| rng.normal()).collect();
        let codebook = new_param(ps, &format!("{name}.codebook"), Tensor::new(vec![cfg.codebook_size, h], data)?)?;
        Ok(Self { level, convs, wn, proj, codebook })
    }

    /// Frame-level features before pooling: conv stack, residual WaveNet
    /// refinement, projection to the code dimension.
    pub fn features(&self, f: &mut Fwd, mel: Var) -> Result<Var> {
        let x = self.convs.forward(f, mel)?;
        let r = self.wn.forward(f, x, None)?;
        let x = f.g.add(x, r)?;
        self.proj.forward(f, x)
    }

    /// Runs the encoder on `mel: [T, 80]`. Boundaries are frame-index segment
    /// starts and must be given exactly for the phoneme and word levels.
    pub fn encode(
        &self,
        f: &mut Fwd,
        mel: Var,
        boundaries: Option<&[usize]>,
        quantize: bool,
        beta: f64,
    ) -> Result<LocalOutput> {
        let feats = self.features(f, mel)?;
        let pre_vq = match (self.level, boundaries) {
            (StyleLevel::Frame, None) => feats,
            (StyleLevel::Frame, Some(_)) => {
                return Err(Error::validation("frame-level style encoding takes no boundaries"))
            }
            (level, None) => {
                return Err(Error::validation(format!("{}-level style encoding needs boundaries", level.name())))
            }
            (_, Some(b)) => pool_by_boundaries(f.g, feats, b)?,
        };
        let vq = if quantize {
            let cb = f.p(self.codebook);
            Some(vq_quantize(f.g, pre_vq, cb, beta)?)
        } else {
            None
        };
        Ok(LocalOutput { pre_vq, vq })
    }
}

/// One alignment layer: learned query and key projections over content and
/// position-tagged style rows; values are the style rows themselves.
#[derive(Clone, Debug)]
pub struct AlignLayer {
    pub q: Linear,
    pub k: Linear,
}

impl AlignLayer {
    /// Attended style per content row, before dropout and the residual.
    pub fn attend(&self, f: &mut Fwd, h: Var, s_pos: Var) -> Result<Var> {
        let q = self.q.forward(f, h)?;
        let k = self.k.forward(f, s_pos)?;
        cross_attention(f, q, k, s_pos)
    }
}

/// Style rows with sinusoidal positions over the style index.
pub fn add_style_positions(f: &mut Fwd, s: Var) -> Result<Var> {
    add_positional(f, s)
}

/// `h <- h + dropout(attend(h, s + PE))` for each layer.
pub fn style_to_content_align(
    f: &mut Fwd,
    h: Var,
    s: Var,
    layers: &[AlignLayer],
    dropout: f64,
) -> Result<Var> {
    if f.g.dims(s)[1] != f.g.dims(h)[1] {
        return Err(Error::validation(format!(
            "style width {} differs from content width {}",
            f.g.dims(s)[1],
            f.g.dims(h)[1]
        )));
    }
    let sp = add_style_positions(f, s)?;
    let mut h = h;
    for layer in layers {
        let a = layer.attend(f, h, sp)?;
        let a = f.dropout(a, dropout)?;
        h = f.g.add(h, a)?;
    }
    Ok(h)
}

/// Alignment layers for the three style levels plus the shared WaveNet
/// refinement applied after them.
#[derive(Clone, Debug)]
pub struct StyleAligner {
    pub frame: Vec<AlignLayer>,
    pub phoneme: Vec<AlignLayer>,
    pub word: Vec<AlignLayer>,
    pub wn: WaveNet,
    pub dropout: f64,
}

impl StyleAligner {
    pub fn new(ps: &mut ParamStore, rng: &mut RngStream, cfg: &ModelConfig) -> Result<Self> {
        let h = cfg.hidden;
        let mut level = |ps: &mut ParamStore, name: &str| -> Result<Vec<AlignLayer>> {
            (0..cfg.align_layers)
                .map(|l| {
                    Ok(AlignLayer {
                        q: Linear::new(ps, rng, &format!("align.{name}.{l}.q"), h, h, false)?,
                        k: Linear::new(ps, rng, &format!("align.{name}.{l}.k"), h, h, false)?,
                    })
                })
                .collect()
        };
        let frame = level(ps, "frame")?;
        let phoneme = level(ps, "phoneme")?;
        let word = level(ps, "word")?;
        let wn = WaveNet::new(ps, rng, "align.wn", h, cfg.align_wn_layers, 3, None)?;
        Ok(Self { frame, phoneme, word, wn, dropout: cfg.align_dropout })
    }

    pub fn layers(&self, level: StyleLevel) -> &[AlignLayer] {
        match level {
            StyleLevel::Frame => &self.frame,
            StyleLevel::Phoneme => &self.phoneme,
            StyleLevel::Word => &self.word,
        }
    }

    /// Attends to frame, phoneme and word styles in turn.
    pub fn align(&self, f: &mut Fwd, h: Var, styles: [Var; 3]) -> Result<Var> {
        let mut h = h;
        for (level, s) in StyleLevel::ALL.into_iter().zip(styles) {
            h = style_to_content_align(f, h, s, self.layers(level), self.dropout)?;
        }
        Ok(h)
    }

    /// Residual WaveNet pass over the stylized sequence.
    pub fn refine(&self, f: &mut Fwd, h: Var) -> Result<Var> {
        let r = self.wn.forward(f, h, None)?;
        Ok(f.g.add(h, r)?)
    }
}
