//! The full model: parameters, per-utterance training features, the
//! batched training forward pass and inference.

use melstyle_autograd::{Graph, ParamId, ParamStore, RngStream, Tensor, Var};

use crate::backbone::{MelDecoder, MelSpectrogram, PhonemeEncoder, PhonemeSequence};
use crate::config::{LossWeights, MixStyleConfig, ModelConfig};
use crate::content_adaptor::{
    duration_loss, durations_from_log, expand_indices, length_regulate, mix_style_layer_norm,
    ConditionalScaleBias, DurationPredictor, PitchPredictor,
};
use crate::error::{Error, Result};
use crate::flow_postnet::{FlowDims, FlowInit, PostNet};
use crate::nn::{new_param, Fwd};
use crate::pipeline::corpus::Utterance;
use crate::pitch_cwt::{
    contour_to_spectrogram, interpolate_log_f0, pitch_bins, pitch_loss_graph, spectrogram_to_contour,
    spectrogram_to_log_f0, warp_mask, PitchContour, PitchSpectrogram,
};
use crate::style_adaptor::{
    phoneme_frame_starts, segment_lengths, word_frame_starts, GlobalEncoder, GlobalStyle, LocalOutput,
    LocalStyleEncoder, StyleAligner, StyleLevel,
};

/// One-shot initializations that have already happened.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ModelState {
    pub global_trained: bool,
    pub flow_initialized: bool,
    pub codebooks_initialized: bool,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub encoder: PhonemeEncoder,
    pub msln: ConditionalScaleBias,
    pub duration: DurationPredictor,
    pub sap: PitchPredictor,
    pub global: GlobalEncoder,
    pub local: [LocalStyleEncoder; 3],
    pub aligner: StyleAligner,
    pub ssp: PitchPredictor,
    pub pitch_embedding: ParamId,
    pub decoder: MelDecoder,
    pub postnet: PostNet,
    pub state: ModelState,
}

/// Training-time features derived once per utterance.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub utt: Utterance,
    pub pitch: PitchSpectrogram,
    pub pitch_bins: Vec<usize>,
    pub phoneme_starts: Vec<usize>,
    pub word_starts: Vec<usize>,
}

impl Prepared {
    pub fn new(utt: Utterance, cfg: &ModelConfig) -> Result<Self> {
        utt.validate(cfg)?;
        let pitch = contour_to_spectrogram(&utt.pitch, cfg.n_scales)?;
        let lf0 = interpolate_log_f0(&utt.pitch)?;
        let bins = pitch_bins(&lf0, cfg.pitch_bins, cfg.f0_min, cfg.f0_max);
        let phoneme_starts = phoneme_frame_starts(&utt.durations);
        let word_starts = word_frame_starts(&utt.durations, &utt.phonemes.word_boundaries);
        Ok(Self { utt, pitch, pitch_bins: bins, phoneme_starts, word_starts })
    }

    pub fn boundaries(&self, level: StyleLevel) -> Option<&[usize]> {
        match level {
            StyleLevel::Frame => None,
            StyleLevel::Phoneme => Some(&self.phoneme_starts),
            StyleLevel::Word => Some(&self.word_starts),
        }
    }
}

/// Training phase: before the warm-up threshold local styles skip
/// quantization and are added by boundary expansion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Full,
}

/// Unweighted loss terms and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub dur: f64,
    pub mel: f64,
    pub pitch: f64,
    pub postnet: f64,
    pub commit: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const TERMS: [&'static str; 5] = ["L_dur", "L_mel", "L_p", "L_pn", "L_c"];

    pub fn terms(&self) -> [f64; 5] {
        [self.dur, self.mel, self.pitch, self.postnet, self.commit]
    }

    /// `sum_i w_i * term_i`, accumulated left to right in the same order as
    /// the training graph.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        w.dur * self.dur + w.mel * self.mel + w.pitch * self.pitch + w.postnet * self.postnet + w.commit * self.commit
    }
}

/// Graph handles of one batch forward pass.
#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub total: Var,
    pub terms: [Var; 5],
    pub breakdown: LossBreakdown,
    /// Code indices per level, concatenated over the batch (empty in warm-up).
    pub codes: [Vec<usize>; 3],
}

/// Per-item inputs of the batch forward that the trainer supplies.
#[derive(Clone, Debug)]
pub struct StyleSource {
    /// Precomputed global style, or `None` to project the utterance's
    /// external embedding on the tape.
    pub cached: Option<GlobalStyle>,
}

/// Result of [`Model::synthesize`].
#[derive(Clone, Debug)]
pub struct Synthesis {
    pub mel: MelSpectrogram,
    pub coarse: Tensor,
    pub durations: Vec<usize>,
    pub pitch: PitchContour,
    pub log_f0: Vec<f64>,
    pub global: GlobalStyle,
    pub attention: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Parallel,
    NonParallel,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(Mode::Parallel),
            "nonparallel" | "non-parallel" => Ok(Mode::NonParallel),
            _ => Err(Error::validation(format!("mode must be parallel or nonparallel, got {s:?}"))),
        }
    }
}

/// Options of one synthesis call.
#[derive(Clone, Debug)]
pub struct SynthesisOptions {
    pub mode: Mode,
    pub temperature: f64,
    pub seed: u64,
    /// Frame counts to use instead of the predicted ones.
    pub durations: Option<Vec<usize>>,
}

/// `a + sign * b` for two mels of the same shape. The post-net models the
/// mel relative to the coarse mel; a shift has unit Jacobian, so the
/// likelihood of the mel itself is unchanged.
fn residual(a: &Tensor, b: &Tensor, sign: f64) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::validation(format!("mel shapes {:?} and {:?} differ", a.dims(), b.dims())));
    }
    Ok(Tensor::new(a.dims().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x + sign * y).collect())?)
}

/// Mean absolute error of a predicted mel against the target frames.
pub fn mel_loss(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    let t = g.constant(target.clone());
    let d = g.sub(pred, t)?;
    let d = g.abs(d)?;
    Ok(g.mean(d)?)
}

fn row(g: &mut Graph, v: &[f64]) -> Result<Var> {
    Ok(g.constant(Tensor::new(vec![1, v.len()], v.to_vec())?))
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new();
        let root = RngStream::new(seed);
        let r = |label: u64| root.derive(label);
        let encoder = PhonemeEncoder::new(&mut ps, &mut r(1), &cfg)?;
        let msln = ConditionalScaleBias::new(&mut ps, &mut r(2), "msln", cfg.hidden, true)?;
        let duration = DurationPredictor::new(&mut ps, &mut r(3), &cfg)?;
        let sap = PitchPredictor::new(&mut ps, &mut r(4), "sap", &cfg)?;
        let global = GlobalEncoder::new(&mut ps, &mut r(5), &cfg)?;
        let local = [
            LocalStyleEncoder::new(&mut ps, &mut r(6), &cfg, StyleLevel::Frame)?,
            LocalStyleEncoder::new(&mut ps, &mut r(7), &cfg, StyleLevel::Phoneme)?,
            LocalStyleEncoder::new(&mut ps, &mut r(8), &cfg, StyleLevel::Word)?,
        ];
        let aligner = StyleAligner::new(&mut ps, &mut r(9), &cfg)?;
        let ssp = PitchPredictor::new(&mut ps, &mut r(10), "ssp", &cfg)?;
        let mut prng = r(11);
        let n = cfg.pitch_bins * cfg.hidden;
        let std = (1.0 / cfg.hidden as f64).sqrt();
        let table = Tensor::new(vec![cfg.pitch_bins, cfg.hidden], (0..n).map(|_| prng.normal() * std).collect())?;
        let pitch_embedding = new_param(&mut ps, "pitch_embedding", table)?;
        let decoder = MelDecoder::new(&mut ps, &mut r(12), &cfg)?;
        let postnet = PostNet::new(&mut ps, &mut r(13), "postnet", FlowDims::from_model(&cfg), FlowInit::Random)?;
        Ok(Self {
            cfg,
            params: ps,
            encoder,
            msln,
            duration,
            sap,
            global,
            local,
            aligner,
            ssp,
            pitch_embedding,
            decoder,
            postnet,
            state: ModelState::default(),
        })
    }

    /// Offset subtracted from log-F0 means so the statistics heads start
    /// near the middle of the modeled pitch range.
    pub fn log_f0_center(&self) -> f64 {
        0.5 * (self.cfg.f0_min.ln() + self.cfg.f0_max.ln())
    }

    /// Inference-mode global style of an utterance: its external embedding
    /// if it carries one, the global encoder otherwise.
    pub fn global_style(&self, utt: &Utterance) -> Result<GlobalStyle> {
        match &utt.embedding {
            Some(e) => self.global.from_external(&self.params, e),
            None => self.global.encode(&self.params, &utt.mel),
        }
    }

    fn style_row(&self, f: &mut Fwd, item: &Prepared, src: &StyleSource) -> Result<Var> {
        match (&src.cached, &item.utt.embedding) {
            (Some(gs), _) => row(f.g, &gs.style_vector()),
            (None, Some(e)) if e.dims() == [self.cfg.external_dim] => {
                let x = row(f.g, e.data())?;
                self.global.external.forward(f, x)
            }
            (None, Some(e)) => row(f.g, e.data()),
            (None, None) => {
                let gs = self.global.encode(&self.params, &item.utt.mel)?;
                row(f.g, &gs.style_vector())
            }
        }
    }

    /// Encodes the three local style sequences of a reference.
    pub fn local_styles(
        &self,
        f: &mut Fwd,
        item: &Prepared,
        quantize: bool,
        beta: f64,
    ) -> Result<Vec<LocalOutput>> {
        let mel = f.g.constant(item.utt.mel.frames.clone());
        self.local.iter().map(|enc| enc.encode(f, mel, item.boundaries(enc.level), quantize, beta)).collect()
    }

    /// Adds pre-quantization local styles to frame-level content by
    /// expanding each segment over its frames.
    fn hard_align(&self, f: &mut Fwd, h: Var, item: &Prepared, locals: &[LocalOutput]) -> Result<Var> {
        let t = item.utt.frames();
        let mut parts = vec![h, locals[0].pre_vq];
        for (lo, starts) in locals[1..].iter().zip([&item.phoneme_starts, &item.word_starts]) {
            let idx = expand_indices(&segment_lengths(starts, t))?;
            parts.push(f.g.gather_rows(lo.pre_vq, &idx)?);
        }
        Ok(f.g.add_all(&parts)?)
    }

    /// Frame-level stylized content: hard alignment in warm-up, attention
    /// over quantized styles otherwise, then the residual refinement.
    fn stylize(&self, f: &mut Fwd, h: Var, item: &Prepared, locals: &[LocalOutput], phase: Phase) -> Result<Var> {
        let hs = match phase {
            Phase::Warmup => self.hard_align(f, h, item, locals)?,
            Phase::Full => self.aligner.align(f, h, [locals[0].style(), locals[1].style(), locals[2].style()])?,
        };
        self.aligner.refine(f, hs)
    }

    /// Decoder input: stylized content + embedded pitch + global style.
    fn decoder_input(&self, f: &mut Fwd, hs: Var, bins: &[usize], w: Var) -> Result<Var> {
        let table = f.p(self.pitch_embedding);
        let pe = f.g.gather_rows(table, bins)?;
        let x = f.g.add(hs, pe)?;
        let wv = f.g.reshape(w, &[self.cfg.hidden])?;
        Ok(f.g.add_row(x, wv)?)
    }

    /// Training forward pass over a batch, with ground-truth durations and
    /// pitch as decoder inputs. Every term is averaged over the batch.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_batch(
        &self,
        f: &mut Fwd,
        items: &[&Prepared],
        styles: &[StyleSource],
        phase: Phase,
        mix: &MixStyleConfig,
        mix_rng: &mut RngStream,
        weights: &LossWeights,
        vq_beta: f64,
    ) -> Result<BatchOutput> {
        if items.is_empty() {
            return Err(Error::validation("empty batch"));
        }
        if styles.len() != items.len() {
            return Err(Error::validation("one style source per batch item is required"));
        }
        let mut hs = Vec::with_capacity(items.len());
        let mut ws = Vec::with_capacity(items.len());
        for (item, src) in items.iter().zip(styles) {
            hs.push(self.encoder.encode(f, &item.utt.phonemes.ids)?);
            ws.push(self.style_row(f, item, src)?);
        }
        let mixed = mix_style_layer_norm(f, &self.msln, &hs, &ws, mix, mix_rng)?;
        let center = self.log_f0_center();
        let mut per: [Vec<Var>; 5] = Default::default();
        let mut codes: [Vec<usize>; 3] = Default::default();
        for (i, item) in items.iter().enumerate() {
            let u = &item.utt;
            let (h, w) = (mixed[i], ws[i]);
            let dpred = self.duration.predict(f, h, w)?;
            per[0].push(duration_loss(f, dpred, &u.durations)?);
            let hc = length_regulate(f, h, &u.durations)?;
            let sap = self.sap.predict(f, hc)?;
            let locals = self.local_styles(f, item, phase == Phase::Full, vq_beta)?;
            let styled = self.stylize(f, hc, item, &locals, phase)?;
            let ssp = self.ssp.predict(f, styled)?;
            let coeffs = f.g.add(sap.coeffs, ssp.coeffs)?;
            let stats = f.g.add(sap.stats, ssp.stats)?;
            per[2].push(pitch_loss_graph(f.g, coeffs, stats, &item.pitch, center)?);
            let dec_in = self.decoder_input(f, styled, &item.pitch_bins, w)?;
            let coarse = self.decoder.decode(f, dec_in)?;
            per[1].push(mel_loss(f.g, coarse, &u.mel.frames)?);
            let c1 = f.g.detach(coarse);
            let c2 = f.g.detach(dec_in);
            let cond = f.g.concat_cols(&[c1, c2])?;
            let target = residual(&u.mel.frames, f.value(c1), -1.0)?;
            let (_, nll) = self.postnet.nll(f, &target, cond)?;
            per[3].push(nll);
            if phase == Phase::Full {
                let mut lc = Vec::with_capacity(3);
                for (l, lo) in locals.iter().enumerate() {
                    let vq = lo.vq.as_ref().expect("quantized in the full phase");
                    codes[l].extend_from_slice(&vq.indices);
                    lc.push(vq.loss);
                }
                per[4].push(f.g.add_all(&lc)?);
            }
        }
        let b = items.len() as f64;
        let mut tv = Vec::with_capacity(5);
        for vars in &per {
            tv.push(if vars.is_empty() {
                f.g.constant(Tensor::scalar(0.0))
            } else {
                let s = f.g.add_all(vars)?;
                f.g.scale(s, 1.0 / b)?
            });
        }
        let terms: [Var; 5] = [tv[0], tv[1], tv[2], tv[3], tv[4]];
        let wv = [weights.dur, weights.mel, weights.pitch, weights.postnet, weights.commit];
        let scaled = terms.iter().zip(wv).map(|(&t, w)| f.g.scale(t, w)).collect::<melstyle_autograd::Result<Vec<_>>>()?;
        let total = f.g.add_all(&scaled)?;
        let v = |k: usize| f.g.scalar(terms[k]);
        let breakdown = LossBreakdown { dur: v(0), mel: v(1), pitch: v(2), postnet: v(3), commit: v(4), total: f.g.scalar(total) };
        Ok(BatchOutput { total, terms, breakdown, codes })
    }

    /// Post-net training pairs of a batch along the warm-up path: the mel
    /// minus the coarse mel, and the condition `[coarse mel | decoder input]`.
    pub fn flow_pairs(&self, items: &[&Prepared], styles: &[StyleSource]) -> Result<Vec<(Tensor, Tensor)>> {
        let mut out = Vec::with_capacity(items.len());
        for (item, src) in items.iter().zip(styles) {
            let mut g = Graph::new(false);
            let mut f = Fwd::new(&mut g, &self.params, RngStream::new(0));
            let h = self.encoder.encode(&mut f, &item.utt.phonemes.ids)?;
            let w = self.style_row(&mut f, item, src)?;
            let hc = length_regulate(&mut f, h, &item.utt.durations)?;
            let locals = self.local_styles(&mut f, item, false, 0.0)?;
            let styled = self.stylize(&mut f, hc, item, &locals, Phase::Warmup)?;
            let dec_in = self.decoder_input(&mut f, styled, &item.pitch_bins, w)?;
            let coarse = self.decoder.decode(&mut f, dec_in)?;
            let cond = f.g.concat_cols(&[coarse, dec_in])?;
            let target = residual(&item.utt.mel.frames, f.value(coarse), -1.0)?;
            out.push((target, f.value(cond).clone()));
        }
        Ok(out)
    }

    /// Pre-quantization local style rows of a batch, per level.
    pub fn local_rows(&self, items: &[&Prepared]) -> Result<[Vec<Vec<f64>>; 3]> {
        let mut rows: [Vec<Vec<f64>>; 3] = Default::default();
        for item in items {
            let mut g = Graph::new(false);
            let mut f = Fwd::new(&mut g, &self.params, RngStream::new(0));
            let locals = self.local_styles(&mut f, item, false, 0.0)?;
            for (l, lo) in locals.iter().enumerate() {
                let t = f.value(lo.pre_vq);
                rows[l].extend((0..t.rows()).map(|r| t.row(r).to_vec()));
            }
        }
        Ok(rows)
    }

    /// Text-to-mel in the style of `reference`.
    pub fn synthesize(&self, text: &PhonemeSequence, reference: &Utterance, opts: &SynthesisOptions) -> Result<Synthesis> {
        if reference.mel.is_empty() {
            return Err(Error::validation("reference is empty"));
        }
        if opts.mode == Mode::Parallel && text.ids != reference.phonemes.ids {
            return Err(Error::validation(format!(
                "parallel synthesis needs the reference transcript ({})",
                reference.id
            )));
        }
        let cfg = &self.cfg;
        let reference = Prepared::new(reference.clone(), cfg)?;
        let global = self.global_style(&reference.utt)?;
        let mut g = Graph::new(false);
        let mut f = Fwd::new(&mut g, &self.params, RngStream::new(opts.seed));
        f.record_attention = true;
        let h = self.encoder.encode(&mut f, &text.ids)?;
        let w = row(f.g, &global.style_vector())?;
        let dpred = self.duration.predict(&mut f, h, w)?;
        let durations = match &opts.durations {
            Some(d) => {
                if d.len() != text.len() {
                    return Err(Error::validation(format!("{} durations for {} phonemes", d.len(), text.len())));
                }
                d.clone()
            }
            None => durations_from_log(f.value(dpred).data()),
        };
        let hc = length_regulate(&mut f, h, &durations)?;
        let frames = f.g.dims(hc)[0];
        let sap = self.sap.predict(&mut f, hc)?;
        let locals = self.local_styles(&mut f, &reference, true, 0.0)?;
        let styled = self.stylize(&mut f, hc, &reference, &locals, Phase::Full)?;
        let ssp = self.ssp.predict(&mut f, styled)?;
        let coeffs = f.g.add(sap.coeffs, ssp.coeffs)?;
        let stats = f.g.add(sap.stats, ssp.stats)?;
        let st = f.value(stats).data().to_vec();
        let joint = PitchSpectrogram { coeffs: f.value(coeffs).clone(), mean: st[0] + self.log_f0_center(), std: st[1] };
        let log_f0 = spectrogram_to_log_f0(&joint);
        let mask = warp_mask(&reference.utt.pitch.voicing(), frames);
        let pitch = spectrogram_to_contour(&joint, &mask)?;
        let bins = pitch_bins(&log_f0, cfg.pitch_bins, cfg.f0_min, cfg.f0_max);
        let dec_in = self.decoder_input(&mut f, styled, &bins, w)?;
        let coarse = self.decoder.decode(&mut f, dec_in)?;
        let cond = f.g.concat_cols(&[coarse, dec_in])?;
        let fine = self.postnet.sample(&mut f, cond, frames, opts.temperature)?;
        let coarse = f.value(coarse).clone();
        let fine = residual(&fine, &coarse, 1.0)?;
        Ok(Synthesis {
            mel: MelSpectrogram::new(fine)?,
            coarse,
            durations,
            pitch,
            log_f0,
            global,
            attention: std::mem::take(&mut f.attention),
        })
    }
}
