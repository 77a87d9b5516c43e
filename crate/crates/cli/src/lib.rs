//! `hci` command-line driver.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error. Results go to standard
//! output as JSON; diagnostics and epoch lines go to standard error.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use hci_core::aux_caption::{AcLevel, CaptionKv, FusionConfig};
use hci_core::embedding_io::{
    generate_synthetic, read_bundle, write_bundle, Bundle, Modality, Split, SyntheticConfig,
};
use hci_core::gradient_suite::{gradient_suite, GRAD_TOLERANCE};
use hci_core::hierarchy::{SentenceMode, SoftmaxAxis};
use hci_core::losses::LossConfig;
use hci_core::model::{caption_index, Model, ModelConfig};
use hci_core::similarity::{
    ci_value, cosine_value, ScoreConfig, ScoreMode, DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_TAU,
};
use hci_core::trainer::{fit_with_progress, load_checkpoint, save_checkpoint, TrainConfig};
use hci_core::{Error, Tape};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "hci",
    version,
    about = "Hierarchical cross-modal interaction for audio-text retrieval"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic embedding bundle
    Synth(SynthArgs),
    /// Train a model on a bundle's train split
    Train(TrainArgs),
    /// Report R@1/5/10 in both directions on one split
    Eval(EvalArgs),
    /// Score one audio/text pair
    Score(ScoreArgs),
    /// Finite-difference check of every loss and trainable block
    GradCheck(GradCheckArgs),
    /// Print item counts, dimension and split sizes of a bundle
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    items: usize,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 20)]
    frames: usize,
    #[arg(long, default_value_t = 12)]
    words: usize,
    /// Caption token rows; 0 writes cls-only captions
    #[arg(long, default_value_t = 8)]
    caption_tokens: usize,
    /// Noise scale of every modality unless overridden
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    #[arg(long)]
    audio_sigma: Option<f64>,
    #[arg(long)]
    caption_sigma: Option<f64>,
    /// Per-item events shared by audio segments and text phrases (0 = none)
    #[arg(long, default_value_t = 0)]
    segments: usize,
    #[arg(long, default_value_t = 0.5)]
    offset_scale: f64,
    /// Per-item deviation from the class latent
    #[arg(long, default_value_t = 0.7)]
    item_spread: f64,
    /// Orthogonalize the class latents
    #[arg(long)]
    orthogonal: bool,
    /// Write no captions
    #[arg(long)]
    no_captions: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum LossArg {
    Ntxent,
    Hci,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum SentenceArg {
    Cls,
    Aggregated,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum AxisArg {
    Rows,
    Slots,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum AcArg {
    Off,
    Da,
    #[value(name = "da+acfi")]
    DaAcfi,
    #[value(name = "da+acfi+tcm")]
    DaAcfiTcm,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum KvArg {
    Cls,
    Tokens,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ScoreModeArg {
    /// Follow the checkpoint's training loss
    Auto,
    ClipSentenceOnly,
    HciCombined,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Bundle directory
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path to write
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = LossArg::Ntxent)]
    loss: LossArg,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// Frame-word term (with --loss hci; both terms are on when neither flag is given)
    #[arg(long)]
    enable_fw: bool,
    /// Segment-phrase term (with --loss hci)
    #[arg(long)]
    enable_sp: bool,
    #[arg(long, value_enum, default_value_t = SentenceArg::Cls)]
    sentence_mode: SentenceArg,
    /// Audio segments per clip
    #[arg(long, default_value_t = 10)]
    ns: usize,
    /// Text phrases per sentence
    #[arg(long, default_value_t = 10)]
    np: usize,
    #[arg(long, value_enum, default_value_t = AcArg::Off)]
    ac: AcArg,
    /// Co-attention heads
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Caption rows used as co-attention keys and values
    #[arg(long, value_enum, default_value_t = KvArg::Cls)]
    caption_kv: KvArg,
    /// Enhance only the clip-level path
    #[arg(long)]
    enhance_clip_only: bool,
    #[arg(long, default_value_t = 1.0)]
    tc_weight: f64,
    /// Fusion weight stored with the checkpoint for evaluation
    #[arg(long, default_value_t = 1.0)]
    fusion_lambda: f64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip the trainable input projections
    #[arg(long)]
    no_projection: bool,
    #[arg(long, value_enum, default_value_t = AxisArg::Rows)]
    softmax_axis: AxisArg,
    /// Reuse the lower level's h at the clip and sentence levels
    #[arg(long)]
    shared_h: bool,
    #[arg(long)]
    cosine_decay: bool,
    /// Clip the global gradient norm to this value
    #[arg(long)]
    clip_grad: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Bundle directory
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to evaluate (or --identity)
    #[arg(long, conflicts_with = "identity")]
    ckpt: Option<PathBuf>,
    /// Evaluate the untrained identity model instead of a checkpoint
    #[arg(long)]
    identity: bool,
    /// train, val or test
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, value_enum, default_value_t = ScoreModeArg::Auto)]
    score_mode: ScoreModeArg,
    /// Frame-word weight (default: the checkpoint's)
    #[arg(long)]
    alpha: Option<f64>,
    /// Segment-phrase weight (default: the checkpoint's)
    #[arg(long)]
    beta: Option<f64>,
    /// Fuse text-caption scores with this weight
    #[arg(long, conflicts_with = "no_fusion")]
    fusion_lambda: Option<f64>,
    /// Disable fusion even if the checkpoint was trained with it
    #[arg(long)]
    no_fusion: bool,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Audio item id
    #[arg(long)]
    audio: String,
    /// Text item id
    #[arg(long)]
    text: String,
    #[arg(long, value_enum, default_value_t = ScoreModeArg::Auto)]
    score_mode: ScoreModeArg,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    /// First seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds
    #[arg(long, default_value_t = 20)]
    seeds: u64,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    data: PathBuf,
}

enum Failure {
    Usage(String),
    Data(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_usage() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(format!("usage error: {}", msg.into()))
}

/// The full argument definition, as used by [`run`].
pub fn command() -> clap::Command {
    <Cli as clap::CommandFactory>::command()
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a, err),
        Command::Eval(a) => eval(a),
        Command::Score(a) => score(a),
        Command::GradCheck(a) => grad_check(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(v) => {
            let text = serde_json::to_string_pretty(&v).expect("JSON values serialize");
            if writeln!(out, "{text}").is_err() {
                return EXIT_DATA;
            }
            EXIT_OK
        }
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "{m}");
            EXIT_USAGE
        }
        Err(Failure::Data(m)) => {
            let _ = writeln!(err, "{m}");
            EXIT_DATA
        }
    }
}

fn split_sizes(bundle: &Bundle) -> Value {
    let mut m = serde_json::Map::new();
    for s in Split::ALL {
        m.insert(s.as_str().into(), json!(bundle.split_pairs(s).len()));
    }
    Value::Object(m)
}

fn bundle_summary(bundle: &Bundle) -> Value {
    json!({
        "dim": bundle.dim(),
        "items": {
            "audio": bundle.count(Modality::Audio),
            "text": bundle.count(Modality::Text),
            "caption": bundle.count(Modality::Caption),
        },
        "pairs": bundle.pairs().len(),
        "captioned_pairs": bundle.pairs().iter().filter(|p| p.caption_id.is_some()).count(),
        "splits": split_sizes(bundle),
    })
}

fn synth(a: SynthArgs) -> CliResult<Value> {
    let config = SyntheticConfig {
        items: a.items,
        classes: a.classes,
        frames: a.frames,
        words: a.words,
        caption_tokens: a.caption_tokens,
        dim: a.dim,
        sigma: a.sigma,
        audio_sigma: a.audio_sigma,
        caption_sigma: a.caption_sigma,
        segments: a.segments,
        offset_scale: a.offset_scale,
        item_spread: a.item_spread,
        orthogonal_latents: a.orthogonal,
        captions: !a.no_captions,
        seed: a.seed,
    };
    let bundle = generate_synthetic(&config)?;
    write_bundle(&bundle, &a.out)?;
    let mut v = bundle_summary(&bundle);
    v["out"] = json!(a.out.display().to_string());
    Ok(v)
}

fn train_config(a: &TrainArgs, dim: usize) -> CliResult<TrainConfig> {
    if a.loss == LossArg::Ntxent && (a.enable_fw || a.enable_sp) {
        return Err(usage("--enable-fw/--enable-sp need --loss hci"));
    }
    let (fw, sp) = match a.loss {
        LossArg::Ntxent => (false, false),
        LossArg::Hci if !a.enable_fw && !a.enable_sp => (true, true),
        LossArg::Hci => (a.enable_fw, a.enable_sp),
    };
    let mut model = ModelConfig::new(dim);
    model.hierarchy.segments = a.ns;
    model.hierarchy.phrases = a.np;
    model.hierarchy.sentence_mode = match a.sentence_mode {
        SentenceArg::Cls => SentenceMode::Cls,
        SentenceArg::Aggregated => SentenceMode::Aggregated,
    };
    model.hierarchy.projection_enabled = !a.no_projection;
    model.hierarchy.softmax_axis = match a.softmax_axis {
        AxisArg::Rows => SoftmaxAxis::Rows,
        AxisArg::Slots => SoftmaxAxis::Slots,
    };
    model.hierarchy.shared_h = a.shared_h;
    model.ac.level = match a.ac {
        AcArg::Off => AcLevel::Off,
        AcArg::Da => AcLevel::Da,
        AcArg::DaAcfi => AcLevel::DaAcfi,
        AcArg::DaAcfiTcm => AcLevel::DaAcfiTcm,
    };
    model.ac.heads = a.heads;
    model.ac.caption_kv = match a.caption_kv {
        KvArg::Cls => CaptionKv::Cls,
        KvArg::Tokens => CaptionKv::Tokens,
    };
    model.ac.enhance_clip_only = a.enhance_clip_only;
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        learning_rate: a.lr,
        seed: a.seed,
        loss: LossConfig {
            tau: a.tau,
            alpha: a.alpha,
            beta: a.beta,
            enable_fw: fw,
            enable_sp: sp,
            enable_tc: false,
            tc_weight: a.tc_weight,
        },
        model,
        fusion: FusionConfig {
            lambda: a.fusion_lambda,
            enabled: a.ac == AcArg::DaAcfiTcm,
        },
        cosine_decay: a.cosine_decay,
        clip_grad: a.clip_grad,
    };
    config.validate()?;
    Ok(config)
}

fn train(a: TrainArgs, err: &mut dyn Write) -> CliResult<Value> {
    let bundle = read_bundle(&a.data)?;
    let config = train_config(&a, bundle.dim())?;
    let fit = fit_with_progress(&bundle, &config, |epoch, b| {
        let _ = writeln!(
            err,
            "epoch {:>4}/{} loss {:.6} (cs {:.6} fw {:.6} sp {:.6} tc {:.6})",
            epoch + 1,
            config.epochs,
            b.l_total,
            b.l_cs,
            b.l_fw,
            b.l_sp,
            b.l_tc
        );
    })?;
    save_checkpoint(&fit.checkpoint, &a.out)?;
    Ok(json!({
        "checkpoint": a.out.display().to_string(),
        "epochs": config.epochs,
        "steps": fit.checkpoint.meta.step,
        "parameters": fit.model.store.total_len(),
        "history": fit.history,
    }))
}

fn resolve_mode(arg: ScoreModeArg, train: Option<&TrainConfig>) -> ScoreMode {
    match arg {
        ScoreModeArg::ClipSentenceOnly => ScoreMode::ClipSentenceOnly,
        ScoreModeArg::HciCombined => ScoreMode::HciCombined,
        ScoreModeArg::Auto => match train {
            Some(t) if t.loss.uses_hierarchy() => ScoreMode::HciCombined,
            Some(_) => ScoreMode::ClipSentenceOnly,
            None => ScoreMode::ClipSentenceOnly,
        },
    }
}

fn load_model(ckpt: &std::path::Path, bundle: &Bundle) -> CliResult<(Model, Option<TrainConfig>)> {
    let ck = load_checkpoint(ckpt)?;
    if ck.meta.model.dim() != bundle.dim() {
        return Err(Failure::Data(format!(
            "data error: checkpoint dimension {} does not match bundle dimension {}",
            ck.meta.model.dim(),
            bundle.dim()
        )));
    }
    Ok((ck.model()?, ck.meta.train))
}

fn eval(a: EvalArgs) -> CliResult<Value> {
    let split: Split = a.split.parse()?;
    let bundle = read_bundle(&a.data)?;
    let (model, train) = match (&a.ckpt, a.identity) {
        (Some(p), _) => load_model(p, &bundle)?,
        (None, true) => (Model::identity(ModelConfig::new(bundle.dim()))?, None),
        (None, false) => return Err(usage("eval needs --ckpt or --identity")),
    };
    let trained_loss = train.as_ref().map(|t| t.loss.clone());
    let score = ScoreConfig {
        tau: trained_loss.as_ref().map_or(DEFAULT_TAU, |l| l.tau),
        mode: resolve_mode(a.score_mode, train.as_ref()),
        alpha: a
            .alpha
            .or(trained_loss.as_ref().map(|l| l.alpha))
            .unwrap_or(DEFAULT_ALPHA),
        beta: a
            .beta
            .or(trained_loss.as_ref().map(|l| l.beta))
            .unwrap_or(DEFAULT_BETA),
    };
    let fusion = match (a.fusion_lambda, a.no_fusion) {
        (Some(lambda), _) => FusionConfig {
            lambda,
            enabled: true,
        },
        (None, true) => FusionConfig {
            enabled: false,
            ..FusionConfig::default()
        },
        (None, false) => train.as_ref().map(|t| t.fusion).unwrap_or_default(),
    };
    let report = hci_core::retrieval_eval::evaluate(&model, &bundle, split, &score, &fusion)?;
    Ok(serde_json::to_value(&report).expect("report serializes"))
}

fn score(a: ScoreArgs) -> CliResult<Value> {
    let bundle = read_bundle(&a.data)?;
    let (model, train) = load_model(&a.ckpt, &bundle)?;
    let loss = train.as_ref().map(|t| t.loss.clone()).unwrap_or_default();
    let config = ScoreConfig {
        tau: loss.tau,
        mode: resolve_mode(a.score_mode, train.as_ref()),
        alpha: loss.alpha,
        beta: loss.beta,
    };
    let captions = caption_index(&bundle);
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let audio = bound
        .audio_item(
            &bundle,
            &a.audio,
            captions.get(&a.audio).map(String::as_str),
        )?
        .detach();
    let text = bound
        .text_item(&bundle, &a.text, hci_core::aux_caption::TextSource::Text)?
        .hierarchy
        .detach();
    let total = hci_core::similarity::eval_score_value(&audio, &text, &config)?;
    Ok(json!({
        "audio": a.audio,
        "text": a.text,
        "score_mode": config.mode,
        "score": total,
        "clip_sentence": cosine_value(&audio.clip, &text.sentence)?,
        "ci_frame_word": ci_value(&audio.frames, &text.words)?,
        "ci_segment_phrase": ci_value(&audio.segments, &text.phrases)?,
    }))
}

fn grad_check(a: GradCheckArgs) -> CliResult<Value> {
    if a.seeds == 0 {
        return Err(usage("--seeds must be >= 1"));
    }
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for seed in a.seed..a.seed + a.seeds {
        for case in gradient_suite(seed)? {
            match worst.iter_mut().find(|(n, _)| *n == case.name) {
                Some((_, w)) => *w = w.max(case.max_rel_error),
                None => worst.push((case.name, case.max_rel_error)),
            }
        }
    }
    let cases: serde_json::Map<String, Value> = worst
        .iter()
        .map(|(n, w)| (n.to_string(), json!(w)))
        .collect();
    Ok(json!({
        "seeds": a.seeds,
        "tolerance": GRAD_TOLERANCE,
        "passed": worst.iter().all(|(_, w)| *w <= GRAD_TOLERANCE),
        "max_rel_error": cases,
    }))
}

fn inspect(a: InspectArgs) -> CliResult<Value> {
    let bundle = read_bundle(&a.data)?;
    Ok(bundle_summary(&bundle))
}
