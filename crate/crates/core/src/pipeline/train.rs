//! Training orchestration: global-encoder pre-training, the two-phase main
//! loop, one-shot data-dependent initializations and per-step records.

use melstyle_autograd::{Adam, AdamConfig, Graph, ParamId, RngStream, Tensor};

use crate::config::{MixStyleConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::Fwd;
use crate::pipeline::corpus::Utterance;
use crate::pipeline::model::{LossBreakdown, Model, Phase, Prepared, StyleSource};
use crate::style_adaptor::{am_softmax_loss, GlobalStyle};

/// What happened in one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub phase: Phase,
    pub lr: f64,
    pub losses: LossBreakdown,
    /// L2 norm of the gradient over all codebook parameters.
    pub codebook_grad_norm: f64,
    /// Number of distinct codes used in the batch per level.
    pub codes_used: [usize; 3],
}

pub struct Trainer {
    pub model: Model,
    pub train: TrainConfig,
    pub adam: Adam,
    /// Steps completed so far; the next step has this index.
    pub step: u64,
    pub history: Vec<StepRecord>,
    data: Vec<Prepared>,
    styles: Vec<GlobalStyle>,
}

fn new_adam() -> Adam {
    let mut adam = Adam::new(AdamConfig::default());
    adam.storage_f32 = true;
    adam
}

impl Trainer {
    /// Prepares the corpus and, unless the model already carries a trained
    /// global encoder, pre-trains it.
    pub fn new(model: Model, train: TrainConfig, corpus: Vec<Utterance>) -> Result<Self> {
        Self::with_optimizer(model, train, corpus, new_adam(), 0)
    }

    /// Resumes from a saved optimizer state and step counter.
    pub fn with_optimizer(
        mut model: Model,
        train: TrainConfig,
        corpus: Vec<Utterance>,
        adam: Adam,
        step: u64,
    ) -> Result<Self> {
        train.validate()?;
        if corpus.is_empty() {
            return Err(Error::validation("empty corpus"));
        }
        let data = corpus.into_iter().map(|u| Prepared::new(u, &model.cfg)).collect::<Result<Vec<_>>>()?;
        if !model.state.global_trained {
            pretrain_global(&mut model, &data, &train)?;
        }
        let styles = data.iter().map(|p| model.global_style(&p.utt)).collect::<Result<Vec<_>>>()?;
        Ok(Self { model, train, adam, step, history: Vec::new(), data, styles })
    }

    pub fn data(&self) -> &[Prepared] {
        &self.data
    }

    pub fn cached_style(&self, i: usize) -> &GlobalStyle {
        &self.styles[i]
    }

    pub fn phase_at(&self, step: u64) -> Phase {
        if step < self.train.warmup_steps {
            Phase::Warmup
        } else {
            Phase::Full
        }
    }

    fn step_rng(&self, step: u64) -> RngStream {
        RngStream::new(self.train.seed).derive(0x7472_6169_6e00 ^ step)
    }

    /// Indices of the batch used at `step`.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let k = self.train.batch_size.min(self.data.len());
        self.step_rng(step).derive(1).choose_distinct(self.data.len(), k)
    }

    fn codebook_ids(&self) -> [ParamId; 3] {
        [self.model.local[0].codebook, self.model.local[1].codebook, self.model.local[2].codebook]
    }

    /// Runs one optimizer step and records it.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let phase = self.phase_at(step);
        let idx = self.batch_indices(step);
        if !self.model.state.flow_initialized {
            self.init_flow(&idx)?;
        }
        if phase == Phase::Full && !self.model.state.codebooks_initialized {
            self.init_codebooks(step)?;
        }
        let items: Vec<&Prepared> = idx.iter().map(|&i| &self.data[i]).collect();
        let styles: Vec<StyleSource> = idx.iter().map(|&i| StyleSource { cached: Some(self.styles[i].clone()) }).collect();
        let rng = self.step_rng(step);
        let mut g = Graph::new(true);
        let (out, grads) = {
            let mut f = Fwd::new(&mut g, &self.model.params, rng.derive(2));
            let mut mix_rng = rng.derive(3);
            let out = self.model.forward_batch(
                &mut f,
                &items,
                &styles,
                phase,
                &self.train.mix,
                &mut mix_rng,
                &self.train.weights,
                self.train.vq_beta,
            )?;
            for (name, v) in LossBreakdown::TERMS.iter().zip(out.breakdown.terms()) {
                if !v.is_finite() {
                    return Err(Error::NonFiniteLoss { step, term: name.to_string() });
                }
            }
            if !out.breakdown.total.is_finite() {
                return Err(Error::NonFiniteLoss { step, term: "total".into() });
            }
            let grads = g.backward(out.total)?.into_params();
            (out, grads)
        };
        let codebook_grad_norm = self
            .codebook_ids()
            .iter()
            .filter_map(|id| grads.get(id))
            .flat_map(|v| v.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let lr = self.train.lr_at(step);
        self.adam.step(&mut self.model.params, &grads, lr).map_err(|e| match e {
            melstyle_autograd::Error::NonFinite(_) => Error::NonFiniteLoss { step, term: "gradient".into() },
            other => other.into(),
        })?;
        let codes_used = out.codes.clone().map(|mut c| {
            c.sort_unstable();
            c.dedup();
            c.len()
        });
        let rec = StepRecord { step, phase, lr, losses: out.breakdown, codebook_grad_norm, codes_used };
        self.history.push(rec.clone());
        self.step += 1;
        Ok(rec)
    }

    /// Steps until `total_steps` have been completed.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepRecord)) -> Result<()> {
        while self.step < self.train.total_steps {
            let rec = self.step()?;
            on_step(&rec);
        }
        Ok(())
    }

    fn sources(&self, idx: &[usize]) -> Vec<StyleSource> {
        idx.iter().map(|&i| StyleSource { cached: Some(self.styles[i].clone()) }).collect()
    }

    /// Actnorm data initialization from the first batch.
    fn init_flow(&mut self, idx: &[usize]) -> Result<()> {
        let items: Vec<&Prepared> = idx.iter().map(|&i| &self.data[i]).collect();
        let batch = self.model.flow_pairs(&items, &self.sources(idx))?;
        self.model.postnet.data_init(&mut self.model.params, &batch)?;
        self.model.state.flow_initialized = true;
        Ok(())
    }

    /// Seeds every codebook with pre-quantization rows of the whole corpus,
    /// so codes start where the warmed-up encoders put their outputs.
    /// Rows are drawn without replacement while they last; repeats get a
    /// small perturbation so that no two codes coincide.
    fn init_codebooks(&mut self, step: u64) -> Result<()> {
        let items: Vec<&Prepared> = self.data.iter().collect();
        let rows = self.model.local_rows(&items)?;
        let mut rng = self.step_rng(step).derive(4);
        for (l, level_rows) in rows.iter().enumerate() {
            let id = self.model.local[l].codebook;
            let (k, h) = {
                let t = self.model.params.get(id);
                (t.rows(), t.cols())
            };
            let n = level_rows.len();
            let spread = {
                let all: Vec<f64> = level_rows.iter().flatten().copied().collect();
                melstyle_autograd::mean_std(&all).1.max(1e-3)
            };
            let mut data = Vec::with_capacity(k * h);
            let mut order = rng.permutation(n);
            for c in 0..k {
                if c % n == 0 && c > 0 {
                    order = rng.permutation(n);
                }
                let src = &level_rows[order[c % n]];
                let jitter = if c < n { 0.0 } else { 0.05 * spread };
                data.extend(src.iter().map(|&x| x + jitter * rng.normal()));
            }
            let mut t = Tensor::new(vec![k, h], data)?;
            t.round_to_f32();
            self.model.params.set(id, t)?;
        }
        self.model.state.codebooks_initialized = true;
        Ok(())
    }
}

/// Trains the global encoder with AM-softmax on speaker and emotion labels,
/// then marks it trained. Items with an external embedding are skipped.
pub fn pretrain_global(model: &mut Model, data: &[Prepared], train: &TrainConfig) -> Result<()> {
    let usable: Vec<&Prepared> = data.iter().filter(|p| p.utt.embedding.is_none()).collect();
    let cfg = model.cfg.clone();
    let enc = model.global.clone();
    let mut adam = new_adam();
    let root = RngStream::new(train.seed).derive(0x676c_6f62);
    for step in 0..if usable.is_empty() { 0 } else { train.pretrain_steps } {
        let mut rng = root.derive(step);
        let k = train.batch_size.min(usable.len());
        let idx = rng.choose_distinct(usable.len(), k);
        let mut g = Graph::new(true);
        let grads = {
            let mut f = Fwd::new(&mut g, &model.params, rng.derive(1));
            let mut ss = Vec::with_capacity(k);
            let mut es = Vec::with_capacity(k);
            for &i in &idx {
                let mel = f.g.constant(usable[i].utt.mel.frames.clone());
                let (s, e) = enc.forward(&mut f, mel)?;
                ss.push(s);
                es.push(e);
            }
            let s = f.g.concat_rows(&ss)?;
            let e = f.g.concat_rows(&es)?;
            let spk: Vec<usize> = idx.iter().map(|&i| usable[i].utt.speaker).collect();
            let emo: Vec<usize> = idx.iter().map(|&i| usable[i].utt.emotion).collect();
            let sc = f.p(enc.speaker_classes);
            let ec = f.p(enc.emotion_classes);
            let ls = am_softmax_loss(f.g, s, &spk, sc, cfg.am_margin, cfg.am_scale)?;
            let le = am_softmax_loss(f.g, e, &emo, ec, cfg.am_margin, cfg.am_scale)?;
            let total = f.g.add(ls, le)?;
            let v = f.g.scalar(total);
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { step, term: "L_global".into() });
            }
            g.backward(total)?.into_params()
        };
        adam.step(&mut model.params, &grads, train.pretrain_lr)?;
    }
    model.state.global_trained = true;
    Ok(())
}

/// Mix-style settings with training disabled, for evaluation passes.
pub fn eval_mix(mix: &MixStyleConfig) -> MixStyleConfig {
    MixStyleConfig { training: false, ..mix.clone() }
}
