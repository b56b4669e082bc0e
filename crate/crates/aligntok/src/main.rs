//! Single binary exposing the full workflow: corpus generation, staged
//! training, offline/streaming encode/decode, longform runs, evaluation,
//! gradient checks, and attention-map export.

use aligntok::corpus::{
    build_longform_set, generate_corpus, longform_manifest_path, read_corpus_dir,
    read_manifest_entries, write_corpus_dir, write_units, write_utterance_set, Corpus,
    CorpusConfig, Utterance,
};
use aligntok::encoder::{attn_map_text, encode_offline, TranscriptSource};
use aligntok::eval::{evaluate, EvalMode};
use aligntok::fsq::index_to_code;
use aligntok::gradcheck;
use aligntok::kernels::matvec;
use aligntok::model::{ParamInit, ParamSet};
use aligntok::stream::{
    stream_decode, stream_encode, stream_longform, write_trace, SliceSource, StreamConfig,
};
use aligntok::train::{
    load_checkpoint, model_configs_for, run_stage, save_checkpoint, split_corpus, AdamW,
    ModelConfigs, Stage, TrainConfig,
};
use aligntok::unitdec::generate_offline;
use aligntok::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

const FORMATS_HELP: &str = "\
Exit codes: 0 success, 1 runtime failure, 2 usage error.

File formats (all integers little-endian):
  TSFR        frame matrix: magic \"TSFR\", u16 version, u32 num_frames, u32 dim, f32 data
  TSUN        unit sequence: magic \"TSUN\", u16 version, u32 count, u16 per unit
  TSCK        checkpoint: magic \"TSCK\", u16 version, u32 line count, u16-length-prefixed
              key=value lines, then a tensor table (u16 name length, name, u8 rank,
              u32 dims, f32 data), sorted by name; optimizer moments under opt.m./opt.v.
  manifest    line-delimited utt_id<TAB>transcript<TAB>frames-path<TAB>units-path<TAB>durations
              (transcript and durations are space-separated integers)
  tokens.tsv  line-delimited utt_id<TAB>text_tokens<TAB>q_indices<TAB>anchors
              (space-separated integers; q field is '-' when encoded with --no-quantize)
  trace       line-delimited wall_clock_ns<TAB>kind<TAB>logical_frame<TAB>payload

Every command that writes an output directory records a run-manifest.txt with the
config hash, seed, and binary version.";

#[derive(Parser)]
#[command(name = "aligntok", version, about = "Streamable text-aligned speech tokenizer", long_about = None, after_long_help = FORMATS_HELP)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus directory (optionally with a longform set)
    GenCorpus(GenCorpusArgs),
    /// Run the staged training pipeline and write per-stage checkpoints
    Train(TrainArgs),
    /// Offline encode: frames -> token records (tokens.tsv)
    Encode(EncodeArgs),
    /// Offline decode: token records -> TSUN unit files
    Decode(DecodeArgs),
    /// Streaming encode+decode with chunked input and windowed state resets
    Stream(StreamArgs),
    /// Longform window sweep over the longform set (Table-2-style rows)
    Longform(LongformArgs),
    /// Evaluate a checkpoint: TER, duration consistency, delta-len, utilization
    Eval(EvalArgs),
    /// Finite-difference gradient suite over all differentiable ops
    Gradcheck(GradcheckArgs),
    /// Export the aggregator attention map for one utterance (text + PGM)
    Attnmap(AttnmapArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    /// Output corpus directory
    #[arg(long)]
    out: PathBuf,
    /// Canonical key=value config file; flags override
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of utterances
    #[arg(long)]
    num: Option<usize>,
    /// Alphabet size V
    #[arg(long)]
    alphabet: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    frames_min: Option<usize>,
    #[arg(long)]
    frames_max: Option<usize>,
    #[arg(long)]
    len_min: Option<usize>,
    #[arg(long)]
    len_max: Option<usize>,
    /// Frame noise sigma
    #[arg(long)]
    sigma: Option<f32>,
    /// Units per character (occurrence-cycled variants)
    #[arg(long)]
    variants: Option<usize>,
    /// Utterances joined per longform entry; 0 disables the longform set
    #[arg(long)]
    longform: Option<usize>,
    /// Number of longform entries
    #[arg(long)]
    longform_count: Option<usize>,
    /// Overwrite a non-empty output directory
    #[arg(long)]
    force: bool,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum StageArg {
    #[value(name = "0")]
    Zero,
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum AblationArg {
    None,
    NoBistage,
    NoJoint,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory (from gen-corpus)
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory for checkpoints and train.log
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    stage: StageArg,
    #[arg(long, value_enum, default_value = "none")]
    ablation: AblationArg,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Peak learning rate for the CTC head
    #[arg(long)]
    lr_head: Option<f32>,
    /// Peak learning rate for everything else
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// λ weight on the auxiliary CTC loss in Stage II
    #[arg(long)]
    lambda: Option<f32>,
    #[arg(long)]
    holdout: Option<f64>,
    /// Stage II probability of a silence-joined two-utterance sample
    #[arg(long)]
    concat_prob: Option<f64>,
    #[arg(long)]
    force: bool,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Ctc,
    Ext,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ManifestArg {
    Main,
    Longform,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Transcript source: built-in CTC or external oracle text
    #[arg(long, value_enum, default_value = "ctc")]
    transcript_mode: ModeArg,
    #[arg(long, value_enum, default_value = "main")]
    manifest: ManifestArg,
    /// Bypass FSQ (tokens carry no q indices and cannot be decoded)
    #[arg(long)]
    no_quantize: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct DecodeArgs {
    /// tokens.tsv produced by encode or stream
    #[arg(long)]
    tokens: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Generation cap: units per aligned token (default from checkpoint)
    #[arg(long)]
    u_max: Option<usize>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct StreamArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Input chunk size C in frames
    #[arg(long, default_value_t = 8)]
    chunk: usize,
    /// Window size W in frames (encoder state resets every W frames)
    #[arg(long, default_value_t = 128)]
    window: usize,
    #[arg(long, value_enum, default_value = "main")]
    manifest: ManifestArg,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct LongformArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated window sizes to sweep
    #[arg(long, default_value = "64,96,128,192")]
    windows: String,
    #[arg(long, default_value_t = 8)]
    chunk: usize,
    #[arg(long)]
    force: bool,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Heldout,
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "ctc")]
    mode: ModeArg,
    #[arg(long, value_enum, default_value = "heldout")]
    split: SplitArg,
    /// Holdout fraction (must match training for a faithful split)
    #[arg(long, default_value_t = 0.1)]
    holdout: f64,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Central-difference step
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    /// Number of seeds (1..=seeds)
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Per-op max relative error threshold
    #[arg(long, default_value_t = 1e-3)]
    threshold: f64,
    /// Optional directory for the report and run-manifest
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AttnmapArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Utterance id from the corpus manifest
    #[arg(long)]
    utt: String,
    #[arg(long)]
    out: PathBuf,
    /// Transcript source (ext guarantees a non-empty token axis untrained)
    #[arg(long, value_enum, default_value = "ext")]
    transcript_mode: ModeArg,
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::GenCorpus(a) => cmd_gen_corpus(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Encode(a) => cmd_encode(a),
        Cmd::Decode(a) => cmd_decode(a),
        Cmd::Stream(a) => cmd_stream(a),
        Cmd::Longform(a) => cmd_longform(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::Attnmap(a) => cmd_attnmap(a),
    }
}

// ---- shared plumbing ----

fn load_config_file(path: Option<&PathBuf>) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    let Some(path) = path else { return Ok(map) };
    let text = std::fs::read_to_string(path)?;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, got {line:?}"),
            });
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Flag > config-file entry > default.
fn pick<T: Copy + FromStr>(
    flag: Option<T>,
    file: &BTreeMap<String, String>,
    key: &str,
    default: T,
) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    match file.get(key) {
        Some(s) => s
            .parse()
            .map_err(|_| Error::Config(format!("bad config value for {key}: {s:?}"))),
        None => Ok(default),
    }
}

fn ensure_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if std::fs::read_dir(dir)?.next().is_some() && !force {
            return Err(Error::Contract(format!(
                "output directory {} is not empty (use --force)",
                dir.display()
            )));
        }
    } else {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn config_hash(settings: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    for (k, v) in settings {
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn write_run_manifest(dir: &Path, command: &str, settings: &BTreeMap<String, String>) -> Result<()> {
    let mut out = format!(
        "command={command}\nversion={}\nconfig_hash={}\n",
        env!("CARGO_PKG_VERSION"),
        config_hash(settings)
    );
    for (k, v) in settings {
        out.push_str(&format!("{k}={v}\n"));
    }
    std::fs::write(dir.join("run-manifest.txt"), out)?;
    Ok(())
}

fn ints(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

fn parse_int_field(s: &str, line: usize) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(' ')
        .map(|tok| {
            tok.parse::<usize>().map_err(|_| Error::Parse {
                line,
                msg: format!("invalid integer {tok:?}"),
            })
        })
        .collect()
}

/// Model/corpus settings a checkpoint must carry so downstream commands can
/// rebuild configurations without the corpus directory.
fn ckpt_config_lines(
    ccfg: &CorpusConfig,
    mcfg: &ModelConfigs,
    seed: u64,
    stage: &str,
    ablation: &str,
) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("corpus.alphabet_size".into(), ccfg.alphabet_size.to_string());
    m.insert("corpus.feature_dim".into(), ccfg.feature_dim.to_string());
    m.insert("corpus.unit_variants".into(), ccfg.unit_variants.to_string());
    m.insert(
        "corpus.frames_per_char_max".into(),
        ccfg.frames_per_char.1.to_string(),
    );
    m.insert("inter.n".into(), mcfg.inter.n.to_string());
    m.insert("inter.m".into(), mcfg.inter.m.to_string());
    m.insert(
        "fsq.levels".into(),
        mcfg.fsq
            .levels
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(","),
    );
    m.insert("train.seed".into(), seed.to_string());
    m.insert("train.stage".into(), stage.to_string());
    m.insert("train.ablation".into(), ablation.to_string());
    m
}

fn ckpt_get<T: FromStr>(config: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let s = config
        .get(key)
        .ok_or_else(|| Error::Decode(format!("checkpoint missing config key {key}")))?;
    s.parse()
        .map_err(|_| Error::Decode(format!("bad checkpoint config value for {key}: {s:?}")))
}

/// Rebuild model configs and the generation cap from checkpoint config lines.
fn mcfg_from_ckpt(config: &BTreeMap<String, String>) -> Result<(ModelConfigs, usize)> {
    let mut m = ModelConfigs::default();
    let alphabet: usize = ckpt_get(config, "corpus.alphabet_size")?;
    let variants: usize = ckpt_get(config, "corpus.unit_variants")?;
    m.enc.feature_dim = ckpt_get(config, "corpus.feature_dim")?;
    m.enc.vocab = alphabet;
    m.dec.text_vocab = alphabet;
    m.dec.unit_vocab = alphabet * variants + 1;
    m.dec.d_z = m.enc.aligned_dim;
    m.inter.n = ckpt_get(config, "inter.n")?;
    m.inter.m = ckpt_get(config, "inter.m")?;
    let levels: Result<Vec<usize>> = config
        .get("fsq.levels")
        .ok_or_else(|| Error::Decode("checkpoint missing config key fsq.levels".into()))?
        .split(',')
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::Decode(format!("bad fsq level {s:?}")))
        })
        .collect();
    m.fsq.levels = levels?;
    let u_max: usize = ckpt_get(config, "corpus.frames_per_char_max")?;
    Ok((m, u_max))
}

fn read_corpus(dir: &Path) -> Result<Corpus> {
    let (cfg, templates, utterances) = read_corpus_dir(dir)?;
    Ok(Corpus { cfg, templates, utterances })
}

fn manifest_utterances(dir: &Path, which: ManifestArg) -> Result<Vec<Utterance>> {
    let path = match which {
        ManifestArg::Main => dir.join("manifest.tsv"),
        ManifestArg::Longform => longform_manifest_path(dir),
    };
    if !path.exists() {
        return Err(Error::Contract(format!("manifest {} not found", path.display())));
    }
    read_manifest_entries(dir, &std::fs::read_to_string(path)?)
}

/// One tokens.tsv line per utterance.
fn token_record(id: &str, tokens: &[usize], q: Option<&[usize]>, anchors: &[usize]) -> String {
    let qf = match q {
        Some(q) => ints(q),
        None => "-".to_string(),
    };
    format!("{id}\t{}\t{qf}\t{}\n", ints(tokens), ints(anchors))
}

struct TokenRecord {
    id: String,
    tokens: Vec<usize>,
    q: Option<Vec<usize>>,
}

fn read_tokens_file(path: &Path) -> Result<Vec<TokenRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected 4 tab-separated fields, got {}", fields.len()),
            });
        }
        let tokens = parse_int_field(fields[1], i + 1)?;
        let q = if fields[2] == "-" {
            None
        } else {
            Some(parse_int_field(fields[2], i + 1)?)
        };
        let anchors = parse_int_field(fields[3], i + 1)?;
        if anchors.len() != tokens.len() || q.as_ref().is_some_and(|q| q.len() != tokens.len()) {
            return Err(Error::Parse {
                line: i + 1,
                msg: "token/q/anchor counts disagree".into(),
            });
        }
        if anchors.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Parse {
                line: i + 1,
                msg: "anchors must be strictly increasing".into(),
            });
        }
        out.push(TokenRecord { id: fields[0].to_string(), tokens, q });
    }
    Ok(out)
}

fn load_model(ckpt: &Path) -> Result<(BTreeMap<String, String>, ParamSet, ModelConfigs, usize)> {
    let (config, params, _opt) = load_checkpoint(ckpt)?;
    let (mcfg, u_max) = mcfg_from_ckpt(&config)?;
    Ok((config, params, mcfg, u_max))
}

// ---- subcommands ----

fn cmd_gen_corpus(a: GenCorpusArgs) -> Result<ExitCode> {
    let file = load_config_file(a.config.as_ref())?;
    let d = CorpusConfig::default();
    let cfg = CorpusConfig {
        seed: pick(a.seed, &file, "seed", d.seed)?,
        alphabet_size: pick(a.alphabet, &file, "alphabet_size", d.alphabet_size)?,
        feature_dim: pick(a.feature_dim, &file, "feature_dim", d.feature_dim)?,
        frames_per_char: (
            pick(a.frames_min, &file, "frames_per_char_min", d.frames_per_char.0)?,
            pick(a.frames_max, &file, "frames_per_char_max", d.frames_per_char.1)?,
        ),
        noise_sigma: pick(a.sigma, &file, "noise_sigma", d.noise_sigma)?,
        utterance_len: (
            pick(a.len_min, &file, "utterance_len_min", d.utterance_len.0)?,
            pick(a.len_max, &file, "utterance_len_max", d.utterance_len.1)?,
        ),
        num_utterances: pick(a.num, &file, "num_utterances", d.num_utterances)?,
        unit_variants: pick(a.variants, &file, "unit_variants", d.unit_variants)?,
    };
    cfg.validate()?;
    let longform_k = pick(a.longform, &file, "longform", 0usize)?;
    let longform_count = pick(a.longform_count, &file, "longform_count", 40usize)?;
    ensure_out(&a.out, a.force)?;

    let corpus = generate_corpus(&cfg)?;
    write_corpus_dir(&a.out, &cfg, &corpus.templates, &corpus.utterances)?;
    let mut settings = BTreeMap::new();
    settings.insert("seed".into(), cfg.seed.to_string());
    settings.insert("alphabet_size".into(), cfg.alphabet_size.to_string());
    settings.insert("num_utterances".into(), cfg.num_utterances.to_string());
    settings.insert("longform".into(), longform_k.to_string());
    settings.insert("longform_count".into(), longform_count.to_string());
    if longform_k > 0 {
        let set = build_longform_set(&corpus, longform_k, longform_count, cfg.seed)?;
        write_utterance_set(&a.out, "longform-manifest.tsv", &cfg, &set)?;
        println!("longform_entries={}", set.len());
    }
    write_run_manifest(&a.out, "gen-corpus", &settings)?;
    println!("utterances={}", corpus.utterances.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let file = load_config_file(a.config.as_ref())?;
    let d = TrainConfig::default();
    let tcfg = TrainConfig {
        lr_ctc_head: pick(a.lr_head, &file, "lr_ctc_head", d.lr_ctc_head)?,
        lr_other: pick(a.lr, &file, "lr_other", d.lr_other)?,
        warmup_steps: pick(a.warmup, &file, "warmup_steps", d.warmup_steps)?,
        batch_size: pick(a.batch, &file, "batch_size", d.batch_size)?,
        epochs_per_stage: pick(a.epochs, &file, "epochs_per_stage", d.epochs_per_stage)?,
        seed: pick(a.seed, &file, "seed", d.seed)?,
        no_bistage: a.ablation == AblationArg::NoBistage,
        no_joint: a.ablation == AblationArg::NoJoint,
        aux_ctc_weight: pick(a.lambda, &file, "aux_ctc_weight", d.aux_ctc_weight)?,
        holdout_frac: pick(a.holdout, &file, "holdout_frac", d.holdout_frac)?,
        concat_prob: pick(a.concat_prob, &file, "concat_prob", d.concat_prob)?,
    };
    tcfg.validate()?;
    if tcfg.no_bistage && a.stage == StageArg::One {
        return Err(Error::Config("--ablation no-bistage disables stage 1".into()));
    }
    if tcfg.no_joint && a.stage == StageArg::Two {
        return Err(Error::Config("--ablation no-joint disables stage 2".into()));
    }
    ensure_out(&a.out, a.force)?;

    let corpus = read_corpus(&a.corpus)?;
    let mcfg = model_configs_for(&corpus.cfg);
    let ablation = match a.ablation {
        AblationArg::None => "none",
        AblationArg::NoBistage => "no-bistage",
        AblationArg::NoJoint => "no-joint",
    };

    let stages: Vec<Stage> = match a.stage {
        StageArg::Zero => vec![Stage::S0],
        StageArg::One => vec![Stage::S1],
        StageArg::Two => vec![Stage::S2],
        StageArg::All => {
            let mut v = vec![Stage::S0];
            if !tcfg.no_bistage {
                v.push(Stage::S1);
            }
            if !tcfg.no_joint {
                v.push(Stage::S2);
            }
            v
        }
    };

    // Fresh init when starting at Stage 0, otherwise resume from the
    // prerequisite stage's checkpoint in the output directory.
    let mut params = if stages[0] == Stage::S0 {
        let mut params = ParamSet::default();
        let mut init = ParamInit::new(&mut params, tcfg.seed);
        aligntok::encoder::init_params(&mut init, &mcfg.enc, &mcfg.fsq);
        aligntok::unitdec::init_params(&mut init, &mcfg.dec);
        params
    } else {
        let prev = match stages[0] {
            Stage::S1 => 0u64,
            Stage::S2 if tcfg.no_bistage => 0,
            Stage::S2 => 1,
            Stage::S0 => unreachable!(),
        };
        let path = a.out.join(format!("ckpt-stage{prev}.tsck"));
        if !path.exists() {
            return Err(Error::Contract(format!(
                "missing prerequisite checkpoint {}",
                path.display()
            )));
        }
        load_checkpoint(&path)?.1
    };

    let (train_idx, _) = split_corpus(corpus.utterances.len(), tcfg.holdout_frac);
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(a.out.join("train.log"))?;
    for stage in &stages {
        let mut opt = AdamW::default();
        run_stage(*stage, &mut params, &mut opt, &corpus, &train_idx, &tcfg, &mcfg, 0, &mut log)?;
        let lines = ckpt_config_lines(&corpus.cfg, &mcfg, tcfg.seed, &stage.index().to_string(), ablation);
        save_checkpoint(
            &a.out.join(format!("ckpt-stage{}.tsck", stage.index())),
            &lines,
            &params,
            &opt,
        )?;
        println!("stage{} done", stage.index());
    }

    let mut settings = ckpt_config_lines(&corpus.cfg, &mcfg, tcfg.seed, "final", ablation);
    settings.insert("seed".into(), tcfg.seed.to_string());
    settings.insert("epochs_per_stage".into(), tcfg.epochs_per_stage.to_string());
    settings.insert("batch_size".into(), tcfg.batch_size.to_string());
    write_run_manifest(&a.out, "train", &settings)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_encode(a: EncodeArgs) -> Result<ExitCode> {
    ensure_out(&a.out, a.force)?;
    let (config, params, mcfg, _u_max) = load_model(&a.ckpt)?;
    let corpus = read_corpus(&a.corpus)?;
    if corpus.cfg.feature_dim != mcfg.enc.feature_dim {
        return Err(Error::Contract(format!(
            "corpus feature_dim {} does not match checkpoint {}",
            corpus.cfg.feature_dim, mcfg.enc.feature_dim
        )));
    }
    let utterances = manifest_utterances(&a.corpus, a.manifest)?;
    let quantize = !a.no_quantize;
    let mut tokens_tsv = String::new();
    for utt in &utterances {
        let source = match a.transcript_mode {
            ModeArg::Ctc => TranscriptSource::Ctc,
            ModeArg::Ext => TranscriptSource::Ext {
                transcript: utt.transcript.clone(),
                anchors: None,
            },
        };
        let enc = encode_offline(
            &params,
            &mcfg.enc,
            &mcfg.fsq,
            &utt.frames,
            utt.num_frames,
            &source,
            quantize,
        )?;
        tokens_tsv.push_str(&token_record(&utt.id, &enc.transcript, enc.q.as_deref(), &enc.anchors));
    }
    std::fs::write(a.out.join("tokens.tsv"), tokens_tsv)?;

    let mut settings = BTreeMap::new();
    settings.insert("seed".into(), config.get("train.seed").cloned().unwrap_or_default());
    settings.insert("transcript_mode".into(), if a.transcript_mode == ModeArg::Ctc { "ctc" } else { "ext" }.into());
    settings.insert("quantize".into(), quantize.to_string());
    write_run_manifest(&a.out, "encode", &settings)?;
    println!("encoded={}", utterances.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_decode(a: DecodeArgs) -> Result<ExitCode> {
    ensure_out(&a.out, a.force)?;
    let (config, params, mcfg, ckpt_u_max) = load_model(&a.ckpt)?;
    let u_max = a.u_max.unwrap_or(ckpt_u_max);
    let records = read_tokens_file(&a.tokens)?;
    let up = params.get("fsq.up.w")?;
    let upb = params.get("fsq.up.b")?;
    let (k, d_z) = (up.shape[0], up.shape[1]);
    let units_dir = a.out.join("units");
    std::fs::create_dir_all(&units_dir)?;
    for (i, rec) in records.iter().enumerate() {
        let Some(q) = &rec.q else {
            return Err(Error::Parse {
                line: i + 1,
                msg: "record has no quantized indices (encoded with --no-quantize?)".into(),
            });
        };
        // Rebuild ẑ rows from the code indices: same up-projection the
        // encoder applied, so the reconstruction is bit-identical.
        let mut zhat = Vec::with_capacity(q.len() * d_z);
        for &qi in q {
            let code = index_to_code(&mcfg.fsq, qi)?;
            let mut row = matvec(&code, &up.data, k, d_z);
            for (r, b) in row.iter_mut().zip(&upb.data) {
                *r += b;
            }
            zhat.extend(row);
        }
        let gen = generate_offline(&params, &mcfg.dec, &mcfg.inter, &rec.tokens, &zhat, u_max)?;
        write_units(&units_dir.join(format!("{}.tsun", rec.id)), &gen.units)?;
        if gen.truncated {
            eprintln!("warning: generation truncated for {}", rec.id);
        }
    }
    let mut settings = BTreeMap::new();
    settings.insert("seed".into(), config.get("train.seed").cloned().unwrap_or_default());
    settings.insert("u_max".into(), u_max.to_string());
    write_run_manifest(&a.out, "decode", &settings)?;
    println!("decoded={}", records.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_stream(a: StreamArgs) -> Result<ExitCode> {
    ensure_out(&a.out, a.force)?;
    let (config, params, mcfg, u_max) = load_model(&a.ckpt)?;
    let utterances = manifest_utterances(&a.corpus, a.manifest)?;
    let scfg = StreamConfig {
        input_chunk_frames: a.chunk,
        window_frames: a.window,
        ..StreamConfig::default()
    };
    scfg.validate()?;
    let units_dir = a.out.join("units");
    let traces_dir = a.out.join("traces");
    std::fs::create_dir_all(&units_dir)?;
    std::fs::create_dir_all(&traces_dir)?;

    let mut tokens_tsv = String::new();
    let mut fcl_sum = 0.0f64;
    let mut rtf_sum = 0.0f64;
    let mut rtf_n = 0usize;
    for utt in &utterances {
        let mut source = SliceSource::new(&utt.frames, mcfg.enc.feature_dim)?;
        let enc = stream_encode(&params, &mcfg.enc, &mcfg.fsq, &scfg, &mut source, true)?;
        let toks: Vec<usize> = enc.tokens.iter().map(|e| e.token).collect();
        let anchors: Vec<usize> = enc.tokens.iter().map(|e| e.anchor).collect();
        let q: Vec<usize> = enc.tokens.iter().filter_map(|e| e.q).collect();
        tokens_tsv.push_str(&token_record(&utt.id, &toks, Some(&q), &anchors));
        let dec = stream_decode(
            &params,
            &mcfg.dec,
            &mcfg.inter,
            &enc.tokens,
            u_max,
            scfg.frame_period_ms,
            utt.num_frames,
        )?;
        write_units(&units_dir.join(format!("{}.tsun", utt.id)), &dec.units)?;
        write_trace(&traces_dir.join(format!("{}.enc.trace", utt.id)), &enc.events)?;
        write_trace(&traces_dir.join(format!("{}.dec.trace", utt.id)), &dec.events)?;
        fcl_sum += enc.report.fcl_ms;
        if let Some(r) = enc.report.rtf_total {
            rtf_sum += r;
            rtf_n += 1;
        }
    }
    std::fs::write(a.out.join("tokens.tsv"), tokens_tsv)?;
    let n = utterances.len().max(1);
    let report = format!(
        "chunk={}\nwindow={}\nutterances={}\nfcl_ms_mean={:.6}\nrtf_encode_mean={:.6}\n",
        a.chunk,
        a.window,
        utterances.len(),
        fcl_sum / n as f64,
        if rtf_n > 0 { rtf_sum / rtf_n as f64 } else { f64::NAN },
    );
    std::fs::write(a.out.join("report.txt"), &report)?;
    print!("{report}");

    let mut settings = BTreeMap::new();
    settings.insert("seed".into(), config.get("train.seed").cloned().unwrap_or_default());
    settings.insert("chunk".into(), a.chunk.to_string());
    settings.insert("window".into(), a.window.to_string());
    write_run_manifest(&a.out, "stream", &settings)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_longform(a: LongformArgs) -> Result<ExitCode> {
    ensure_out(&a.out, a.force)?;
    let (config, params, mcfg, u_max) = load_model(&a.ckpt)?;
    let utterances = manifest_utterances(&a.corpus, ManifestArg::Longform)?;
    let windows: Result<Vec<usize>> = a
        .windows
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad window size {s:?}")))
        })
        .collect();
    let windows = windows?;

    let mut report = String::from("window\tter\tdelta_len_mean\tfcl_ms_mean\trtf_total_mean\n");
    for &w in &windows {
        let scfg = StreamConfig {
            input_chunk_frames: a.chunk,
            window_frames: w,
            ..StreamConfig::default()
        };
        scfg.validate()?;
        let traces_dir = a.out.join(format!("traces/w{w}"));
        std::fs::create_dir_all(&traces_dir)?;
        let mut edits = 0usize;
        let mut refs = 0usize;
        let mut dlen_sum = 0.0f64;
        let mut fcl_sum = 0.0f64;
        let mut rtf_sum = 0.0f64;
        let mut rtf_n = 0usize;
        for utt in &utterances {
            let mut source = SliceSource::new(&utt.frames, mcfg.enc.feature_dim)?;
            let out = stream_longform(
                &params,
                &mcfg.enc,
                &mcfg.fsq,
                &mcfg.dec,
                &mcfg.inter,
                &scfg,
                &mut source,
                true,
                u_max,
                Some(utt.units.len()),
            )?;
            edits += aligntok::eval::edit_distance(&utt.transcript, &out.transcript);
            refs += utt.transcript.len();
            dlen_sum += out.delta_len_pct.unwrap_or(0.0);
            fcl_sum += out.report.fcl_ms;
            if let Some(r) = out.report.rtf_total {
                rtf_sum += r;
                rtf_n += 1;
            }
            write_trace(&traces_dir.join(format!("{}.trace", utt.id)), &out.events)?;
        }
        let n = utterances.len().max(1) as f64;
        report.push_str(&format!(
            "{w}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            edits as f64 / refs.max(1) as f64,
            dlen_sum / n,
            fcl_sum / n,
            if rtf_n > 0 { rtf_sum / rtf_n as f64 } else { f64::NAN },
        ));
    }
    std::fs::write(a.out.join("report.tsv"), &report)?;
    print!("{report}");

    let mut settings = BTreeMap::new();
    settings.insert("seed".into(), config.get("train.seed").cloned().unwrap_or_default());
    settings.insert("chunk".into(), a.chunk.to_string());
    settings.insert("windows".into(), a.windows.clone());
    write_run_manifest(&a.out, "longform", &settings)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    ensure_out(&a.out, a.force)?;
    let (config, params, mcfg, _u_max) = load_model(&a.ckpt)?;
    let corpus = read_corpus(&a.corpus)?;
    let (train_idx, held_idx) = split_corpus(corpus.utterances.len(), a.holdout);
    let idx: Vec<usize> = match a.split {
        SplitArg::Train => train_idx,
        SplitArg::Heldout => held_idx,
        SplitArg::All => (0..corpus.utterances.len()).collect(),
    };
    let selected: Vec<Utterance> = idx.iter().map(|&i| corpus.utterances[i].clone()).collect();
    let mode = match a.mode {
        ModeArg::Ctc => EvalMode::Ctc,
        ModeArg::Ext => EvalMode::ExtOracle,
    };
    let report = evaluate(&params, &mcfg, &corpus.cfg, &selected, mode)?;
    std::fs::write(a.out.join("report.txt"), report.text() + "\n" + &report.table())?;
    std::fs::write(a.out.join("report.csv"), report.csv())?;
    print!("{}", report.text());

    let mut settings = BTreeMap::new();
    settings.insert("seed".into(), config.get("train.seed").cloned().unwrap_or_default());
    settings.insert("mode".into(), mode.as_str().into());
    settings.insert("holdout".into(), a.holdout.to_string());
    write_run_manifest(&a.out, "eval", &settings)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let mut worst: BTreeMap<&'static str, f64> = BTreeMap::new();
    for seed in 1..=a.seeds {
        for check in gradcheck::suite(seed, a.eps)? {
            let e = worst.entry(check.name).or_insert(0.0);
            if check.max_rel_err > *e {
                *e = check.max_rel_err;
            }
        }
    }
    let mut any_fail = false;
    let mut lines = String::new();
    for (name, err) in &worst {
        let ok = *err < a.threshold;
        any_fail |= !ok;
        lines.push_str(&format!("{name}\t{err:.6e}\t{}\n", if ok { "pass" } else { "fail" }));
    }
    print!("{lines}");
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("gradcheck-report.txt"), &lines)?;
        let mut settings = BTreeMap::new();
        settings.insert("eps".into(), a.eps.to_string());
        settings.insert("seeds".into(), a.seeds.to_string());
        settings.insert("threshold".into(), a.threshold.to_string());
        write_run_manifest(out, "gradcheck", &settings)?;
    }
    Ok(if any_fail { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn cmd_attnmap(a: AttnmapArgs) -> Result<ExitCode> {
    ensure_out(&a.out, a.force)?;
    let (config, params, mcfg, _u_max) = load_model(&a.ckpt)?;
    let utterances = manifest_utterances(&a.corpus, ManifestArg::Main)?;
    let utt = utterances
        .iter()
        .find(|u| u.id == a.utt)
        .ok_or_else(|| Error::Contract(format!("utterance {:?} not in manifest", a.utt)))?;
    let source = match a.transcript_mode {
        ModeArg::Ctc => TranscriptSource::Ctc,
        ModeArg::Ext => TranscriptSource::Ext {
            transcript: utt.transcript.clone(),
            anchors: None,
        },
    };
    let enc = encode_offline(
        &params,
        &mcfg.enc,
        &mcfg.fsq,
        &utt.frames,
        utt.num_frames,
        &source,
        true,
    )?;
    let (n, t) = (enc.transcript.len(), enc.num_frames);
    if n == 0 {
        return Err(Error::Contract(
            "empty transcript; no attention rows to export (try --transcript-mode ext)".into(),
        ));
    }
    std::fs::write(a.out.join(format!("attn-{}.txt", utt.id)), attn_map_text(&enc.attn, n, t))?;
    std::fs::write(a.out.join(format!("attn-{}.pgm", utt.id)), attn_pgm(&enc.attn, n, t))?;

    let mut normalized = true;
    let mut monotone = true;
    let mut prev_arg = 0usize;
    for i in 0..n {
        let row = &enc.attn[i * t..(i + 1) * t];
        let sum: f32 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-3 {
            normalized = false;
        }
        let arg = row
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
            .map(|(j, _)| j)
            .unwrap();
        if arg < prev_arg {
            monotone = false;
        }
        prev_arg = arg;
    }
    println!("rows_normalized={normalized}");
    println!("monotone_anchors={monotone}");

    let mut settings = BTreeMap::new();
    settings.insert("seed".into(), config.get("train.seed").cloned().unwrap_or_default());
    settings.insert("utt".into(), a.utt.clone());
    write_run_manifest(&a.out, "attnmap", &settings)?;
    Ok(ExitCode::SUCCESS)
}

/// ASCII portable graymap, globally scaled to the peak attention weight.
fn attn_pgm(attn: &[f32], n: usize, t: usize) -> String {
    let max = attn.iter().cloned().fold(0.0f32, f32::max).max(1e-9);
    let mut out = format!("P2\n{t} {n}\n255\n");
    for i in 0..n {
        let row: Vec<String> = (0..t)
            .map(|j| ((attn[i * t + j] / max * 255.0).round() as u32).min(255).to_string())
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}
