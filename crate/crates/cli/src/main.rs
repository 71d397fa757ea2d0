use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use melstyle::autograd::Tensor;
use melstyle::backbone::{MelSpectrogram, PhonemeSequence, Vocabulary};
use melstyle::config::Config;
use melstyle::pipeline::checkpoint::Checkpoint;
use melstyle::pipeline::corpus::{ingest_corpus, write_corpus, ToyCorpus, ToySpec, Utterance};
use melstyle::pipeline::eval::score_corpus;
use melstyle::pipeline::metrics::metric_ffe;
use melstyle::pipeline::model::{Mode, Model, Prepared, SynthesisOptions};
use melstyle::pipeline::plot::plot_mel;
use melstyle::pipeline::train::Trainer;
use melstyle::pitch_cwt::{warp_mask, PitchContour};

#[derive(Parser)]
#[command(name = "melstyle", version, about = "Style-transfer text-to-mel synthesis on toy corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the procedural toy corpus (manifest, vocabulary, GSTN files).
    GenCorpus(GenCorpus),
    /// Train a model on a manifest and save a checkpoint.
    Train(Train),
    /// Synthesize a mel spectrogram in the style of a reference utterance.
    Synth(Synth),
    /// Score a checkpoint on a corpus: teacher-forced mel loss, copy-synthesis FFE and MAE.
    Eval(Eval),
    /// Render a GSTN mel spectrogram as a PGM image.
    Plot(Plot),
}

#[derive(Args)]
struct GenCorpus {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write every speaker x emotion x text combination instead of the
    /// 16-utterance training set.
    #[arg(long)]
    full: bool,
}

#[derive(Args)]
struct Train {
    /// Corpus manifest (tab-separated).
    #[arg(long)]
    manifest: PathBuf,
    /// key=value config file; `preset = tiny|desk|full` selects the base.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Resume from this checkpoint (model, optimizer and step).
    #[arg(long, conflicts_with = "init_from")]
    checkpoint: Option<PathBuf>,
    /// Start from the parameters of this checkpoint with a fresh optimizer.
    #[arg(long)]
    init_from: Option<PathBuf>,
    /// Where to write the final checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Log every this many steps.
    #[arg(long, default_value_t = 100)]
    log_every: u64,
}

#[derive(Args)]
struct Synth {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest holding the reference utterance.
    #[arg(long)]
    manifest: PathBuf,
    /// Id of the reference utterance.
    #[arg(long)]
    reference: String,
    /// Phoneme symbols to speak (space-separated, looked up in the
    /// `vocab.txt` beside the manifest). Defaults to the reference transcript.
    #[arg(long, conflicts_with = "text_from")]
    text: Option<String>,
    /// Speak the transcript of this manifest utterance.
    #[arg(long)]
    text_from: Option<String>,
    #[arg(long, default_value = "parallel")]
    mode: String,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output GSTN mel file; a PGM plot is written beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write a per-utterance TSV report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Plot {
    /// GSTN mel file (`[T, 80]`).
    #[arg(long)]
    mel: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 validation, 2 numerical, 3 I/O.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<melstyle::Error>() {
            return match err {
                melstyle::Error::NonFiniteLoss { .. } | melstyle::Error::Numerical(_) => 2,
                melstyle::Error::Io { .. } => 3,
                melstyle::Error::Validation(_) | melstyle::Error::Format { .. } => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::Train(a) => train(a),
        Command::Synth(a) => synth(a),
        Command::Eval(a) => eval(a),
        Command::Plot(a) => plot(a),
    }
}

fn gen_corpus(a: GenCorpus) -> anyhow::Result<()> {
    let toy = ToyCorpus::new(ToySpec::default(), a.seed)?;
    let utts = if a.full { toy.full_grid()? } else { toy.training_set()? };
    let manifest = write_corpus(&a.out, &utts, &toy.vocab)?;
    info!("wrote {} utterances to {}", utts.len(), manifest.display());
    Ok(())
}

fn load_config(path: Option<&Path>) -> anyhow::Result<Config> {
    Ok(match path {
        Some(p) => Config::load(p)?,
        None => Config::preset("desk")?,
    })
}

fn train(a: Train) -> anyhow::Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    let (model, trainer_for) = if let Some(path) = &a.checkpoint {
        let ck = Checkpoint::load(path)?;
        if ck.config.model != cfg.model && a.config.is_some() {
            bail!(melstyle::Error::validation("--config describes a different model than the checkpoint"));
        }
        cfg.model = ck.config.model.clone();
        let (model, adam) = ck.restore()?;
        info!("resuming from {} at step {}", path.display(), ck.step);
        (model, Some((adam, ck.step)))
    } else if let Some(path) = &a.init_from {
        let ck = Checkpoint::load(path)?;
        cfg.model = ck.config.model.clone();
        let (model, _) = ck.restore()?;
        info!("initialized from {}", path.display());
        (model, None)
    } else {
        (Model::new(cfg.model.clone(), cfg.train.seed)?, None)
    };
    let corpus = ingest_corpus(&a.manifest, &cfg.model)?;
    info!("{} utterances, {} steps ({} warm-up)", corpus.len(), cfg.train.total_steps, cfg.train.warmup_steps);
    let mut trainer = match trainer_for {
        Some((adam, step)) => Trainer::with_optimizer(model, cfg.train.clone(), corpus, adam, step)?,
        None => Trainer::new(model, cfg.train.clone(), corpus)?,
    };
    let every = a.log_every.max(1);
    trainer.run(|r| {
        if (r.step + 1) % every == 0 {
            let l = &r.losses;
            info!(
                "step {:>6} {:?} lr {:.2e} total {:.4} dur {:.4} mel {:.4} pitch {:.4} postnet {:.4} commit {:.4}",
                r.step + 1,
                r.phase,
                r.lr,
                l.total,
                l.dur,
                l.mel,
                l.pitch,
                l.postnet,
                l.commit
            );
        }
    })?;
    Checkpoint::capture(&cfg, &trainer.model, &trainer.adam, trainer.step).save(&a.out)?;
    info!("saved {}", a.out.display());
    Ok(())
}

fn find<'a>(corpus: &'a [Utterance], id: &str) -> anyhow::Result<&'a Utterance> {
    corpus
        .iter()
        .find(|u| u.id == id)
        .ok_or_else(|| melstyle::Error::validation(format!("utterance {id:?} is not in the manifest")).into())
}

fn synth(a: Synth) -> anyhow::Result<()> {
    let mode = Mode::parse(&a.mode)?;
    let (model, cfg) = load_model(&a.checkpoint)?;
    let corpus = ingest_corpus(&a.manifest, &model.cfg)?;
    let reference = find(&corpus, &a.reference)?;
    let text = match (&a.text, &a.text_from) {
        (Some(symbols), _) => {
            let vocab_path = a.manifest.parent().unwrap_or(Path::new(".")).join("vocab.txt");
            let vocab = Vocabulary::load(&vocab_path)?;
            PhonemeSequence::single_words(vocab.encode(symbols)?)?
        }
        (None, Some(id)) => find(&corpus, id)?.phonemes.clone(),
        (None, None) => reference.phonemes.clone(),
    };
    let opts = SynthesisOptions {
        mode,
        temperature: a.temperature.unwrap_or(cfg.train.temperature),
        seed: a.seed,
        durations: None,
    };
    let syn = model.synthesize(&text, reference, &opts)?;
    syn.mel.frames.save(&a.out)?;
    let pgm = a.out.with_extension("pgm");
    plot_mel(&syn.mel, &pgm)?;
    let warped = PitchContour::new(
        warp_mask(&reference.pitch.voicing(), syn.mel.len())
            .iter()
            .zip(resample(&reference.pitch.f0, syn.mel.len()))
            .map(|(&v, f)| if v { f } else { 0.0 })
            .collect(),
    )?;
    info!(
        "{} frames from {} phonemes, FFE vs reference contour {:.3}; wrote {} and {}",
        syn.mel.len(),
        text.len(),
        metric_ffe(&warped, &syn.pitch)?,
        a.out.display(),
        pgm.display()
    );
    Ok(())
}

/// Nearest-frame resampling to `len` frames.
fn resample(x: &[f64], len: usize) -> Vec<f64> {
    (0..len).map(|i| x[(i * x.len() / len).min(x.len() - 1)]).collect()
}

fn load_model(path: &Path) -> anyhow::Result<(Model, Config)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let (model, _) = ck.restore()?;
    Ok((model, ck.config))
}

fn eval(a: Eval) -> anyhow::Result<()> {
    let (model, cfg) = load_model(&a.checkpoint)?;
    let corpus = ingest_corpus(&a.manifest, &model.cfg)?;
    let items = corpus.into_iter().map(|u| Prepared::new(u, &model.cfg)).collect::<Result<Vec<_>, _>>()?;
    let temperature = a.temperature.unwrap_or(cfg.train.temperature);
    let score = score_corpus(&model, &items, temperature, a.seed)?;
    let mut report = String::from("id\tmel\tffe\tsynth_mae\n");
    for u in &score.utterances {
        report.push_str(&format!("{}\t{:.6}\t{:.6}\t{:.6}\n", u.id, u.losses.mel, u.ffe, u.synth_mae));
    }
    report.push_str(&format!("mean\t{:.6}\t{:.6}\t{:.6}\n", score.mel, score.ffe, score.synth_mae));
    if let Some(out) = &a.out {
        std::fs::write(out, &report).map_err(|e| melstyle::Error::io(out, e))?;
    }
    print!("{report}");
    Ok(())
}

fn plot(a: Plot) -> anyhow::Result<()> {
    let frames = Tensor::load(&a.mel).map_err(melstyle::Error::from)?;
    let mel = MelSpectrogram::new(frames)?;
    plot_mel(&mel, &a.out)?;
    info!("wrote {}", a.out.display());
    Ok(())
}
