//! Corpus-level evaluation of a trained model.

use melstyle_autograd::{Graph, RngStream};

use crate::config::{LossWeights, MixStyleConfig};
use crate::error::Result;
use crate::nn::Fwd;
use crate::pipeline::metrics::{mel_mae, metric_ffe};
use crate::pipeline::model::{LossBreakdown, Mode, Model, Phase, Prepared, StyleSource, SynthesisOptions};

/// Scores of one training utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceScore {
    pub id: String,
    /// Inference-mode loss terms with ground-truth durations and pitch.
    pub losses: LossBreakdown,
    /// FFE of copy synthesis (own transcript, own reference, ground-truth
    /// durations) against the ground-truth contour.
    pub ffe: f64,
    /// MAE of the copy-synthesized mel against the ground truth.
    pub synth_mae: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusScore {
    pub utterances: Vec<UtteranceScore>,
    pub mel: f64,
    pub ffe: f64,
    pub synth_mae: f64,
}

/// Loss terms of one utterance in inference mode.
pub fn teacher_forced(model: &Model, item: &Prepared) -> Result<LossBreakdown> {
    let phase = if model.state.codebooks_initialized { Phase::Full } else { Phase::Warmup };
    let style = StyleSource { cached: Some(model.global_style(&item.utt)?) };
    let mut g = Graph::new(false);
    let mut f = Fwd::new(&mut g, &model.params, RngStream::new(0));
    let mix = MixStyleConfig { training: false, ..MixStyleConfig::default() };
    let out = model.forward_batch(
        &mut f,
        &[item],
        std::slice::from_ref(&style),
        phase,
        &mix,
        &mut RngStream::new(0),
        &LossWeights::default(),
        0.25,
    )?;
    Ok(out.breakdown)
}

pub fn score_corpus(model: &Model, items: &[Prepared], temperature: f64, seed: u64) -> Result<CorpusScore> {
    let mut utterances = Vec::with_capacity(items.len());
    for item in items {
        let u = &item.utt;
        let losses = teacher_forced(model, item)?;
        let opts = SynthesisOptions {
            mode: Mode::Parallel,
            temperature,
            seed: RngStream::new(seed).derive(melstyle_autograd::rng::label_of(&u.id)).seed(),
            durations: Some(u.durations.clone()),
        };
        let syn = model.synthesize(&u.phonemes, u, &opts)?;
        utterances.push(UtteranceScore {
            id: u.id.clone(),
            losses,
            ffe: metric_ffe(&u.pitch, &syn.pitch)?,
            synth_mae: mel_mae(&syn.mel.frames, &u.mel.frames)?,
        });
    }
    let n = utterances.len().max(1) as f64;
    let avg = |f: fn(&UtteranceScore) -> f64| utterances.iter().map(f).sum::<f64>() / n;
    Ok(CorpusScore {
        mel: avg(|s| s.losses.mel),
        ffe: avg(|s| s.ffe),
        synth_mae: avg(|s| s.synth_mae),
        utterances,
    })
}
