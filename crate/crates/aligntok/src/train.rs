//! Staged training: Stage 0 pretrains the encoder + CTC head, Stage I trains
//! the aggregator/decoder on oracle transcripts with FSQ bypassed, Stage II
//! adapts everything to CTC transcripts with straight-through quantization.
//! Batch order is a pure function of (seed, stage, step), so a resumed run
//! reproduces an uninterrupted one exactly.

use std::collections::BTreeMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::corpus::{concat_longform, Corpus, Utterance};
use crate::ctc::{ctc_loss, greedy_decode};
use crate::encoder::{aggregate_graph, asr_encode_graph, ctc_head_graph, fsq_pipeline_graph, EncoderConfig};
use crate::error::{Error, Result};
use crate::fsq::FsqConfig;
use crate::model::{Binder, ParamInit, ParamSet};
use crate::unitdec::{interleave, unit_ce_loss, DecoderConfig, InterleaveConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    S0,
    S1,
    S2,
}

impl Stage {
    pub fn index(&self) -> u64 {
        match self {
            Stage::S0 => 0,
            Stage::S1 => 1,
            Stage::S2 => 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr_ctc_head: f32,
    pub lr_other: f32,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub epochs_per_stage: usize,
    pub seed: u64,
    pub no_bistage: bool,
    pub no_joint: bool,
    /// λ weight on the auxiliary CTC loss kept alive in Stage II.
    pub aux_ctc_weight: f32,
    pub holdout_frac: f64,
    /// Stage II augmentation: probability of drawing a silence-joined
    /// two-utterance concatenation instead of a single utterance.
    pub concat_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_ctc_head: 1e-3,
            lr_other: 1e-3,
            warmup_steps: 100,
            batch_size: 16,
            epochs_per_stage: 120,
            seed: 7,
            no_bistage: false,
            no_joint: false,
            aux_ctc_weight: 1.0,
            holdout_frac: 0.1,
            concat_prob: 0.3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_ctc_head > 0.0) || !(self.lr_other > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs_per_stage == 0 {
            return Err(Error::Config("batch_size and epochs_per_stage must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_frac) {
            return Err(Error::Config("holdout_frac must be in [0,1)".into()));
        }
        if !(0.0..=1.0).contains(&self.concat_prob) {
            return Err(Error::Config("concat_prob must be in [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ModelConfigs {
    pub enc: EncoderConfig,
    pub fsq: FsqConfig,
    pub dec: DecoderConfig,
    pub inter: InterleaveConfig,
}

impl Default for ModelConfigs {
    fn default() -> Self {
        Self {
            enc: EncoderConfig::default(),
            fsq: FsqConfig::default(),
            dec: DecoderConfig::default(),
            inter: InterleaveConfig::default(),
        }
    }
}

/// Model configuration derived from a corpus: vocabularies and feature dims
/// track the corpus, everything else keeps its default size.
pub fn model_configs_for(corpus_cfg: &crate::corpus::CorpusConfig) -> ModelConfigs {
    let mut m = ModelConfigs::default();
    m.enc.feature_dim = corpus_cfg.feature_dim;
    m.enc.vocab = corpus_cfg.alphabet_size;
    m.dec.text_vocab = corpus_cfg.alphabet_size;
    m.dec.unit_vocab = corpus_cfg.unit_vocab();
    m.dec.d_z = m.enc.aligned_dim;
    // 6 dims of 3 levels (729 codes, ≈ the 625 of [5,5,5,5]): six grid dims
    // keep three (sin, cos) phase pairs alive through the bottleneck, which
    // the decoder needs to resolve token durations; four dims measurably cap
    // teacher-forced unit accuracy below the acceptance bar.
    m.fsq.levels = vec![3; 6];
    m
}

/// Linear warmup to `peak`, then cosine decay to 0.1 * peak.
pub fn lr_at(step: usize, total: usize, warmup: usize, peak: f32) -> f32 {
    if total == 0 {
        return peak;
    }
    if step < warmup {
        return peak * (step + 1) as f32 / warmup as f32;
    }
    let span = (total.saturating_sub(warmup)).max(1) as f32;
    let frac = (step - warmup) as f32 / span;
    let cos = 0.5 * (1.0 + (std::f32::consts::PI * frac.min(1.0)).cos());
    0.1 * peak + 0.9 * peak * cos
}

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const WEIGHT_DECAY: f32 = 0.01;
const ADAM_EPS: f32 = 1e-8;

/// Decoupled-weight-decay adaptive optimizer (AdamW).
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
    pub t: u64,
}

impl AdamW {
    /// One update over the given gradients; `lr_head` applies to `ctc.*`
    /// parameters, `lr_other` to everything else.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &BTreeMap<String, Vec<f32>>,
        lr_head: f32,
        lr_other: f32,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (name, grad) in grads {
            let lr = if name.starts_with("ctc.") { lr_head } else { lr_other };
            let p = params.get_mut(name)?;
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            for i in 0..grad.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * grad[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * grad[i] * grad[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.data[i] -= lr * (mh / (vh.sqrt() + ADAM_EPS) + WEIGHT_DECAY * p.data[i]);
            }
        }
        Ok(())
    }
}

/// Deterministic split: the last `ceil(n*frac)` utterances are held out.
pub fn split_corpus(n: usize, holdout_frac: f64) -> (Vec<usize>, Vec<usize>) {
    let held = ((n as f64 * holdout_frac).ceil() as usize).min(n);
    let cut = n - held;
    ((0..cut).collect(), (cut..n).collect())
}

/// True character start frames from per-character durations.
pub fn oracle_anchors(durations: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(durations.len());
    let mut acc = 0usize;
    for &d in durations {
        out.push(acc);
        acc += d;
    }
    out
}

fn mix(seed: u64, stage: u64, step: u64) -> u64 {
    let mut h = seed ^ 0x51_7c_c1_b7_27_22_0a_95;
    for x in [stage.wrapping_add(1), step.wrapping_add(1)] {
        h ^= x.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        h = h.rotate_left(23).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    }
    h
}

fn add_grads(acc: &mut BTreeMap<String, Vec<f32>>, g: BTreeMap<String, Vec<f32>>) {
    for (name, grad) in g {
        match acc.get_mut(&name) {
            Some(a) => {
                for (x, y) in a.iter_mut().zip(grad) {
                    *x += y;
                }
            }
            None => {
                acc.insert(name, grad);
            }
        }
    }
}

/// Per-sample losses and gradients for one stage.
/// Returns (ctc loss, ce loss, grads); either loss may be absent (infeasible
/// CTC alignment or an empty CTC transcript early in Stage II).
pub fn sample_losses(
    params: &ParamSet,
    mcfg: &ModelConfigs,
    stage: Stage,
    aux_ctc_weight: f32,
    utt: &Utterance,
) -> Result<(Option<f64>, Option<f64>, BTreeMap<String, Vec<f32>>)> {
    let enc = &mcfg.enc;
    let trainable: Box<dyn Fn(&str) -> bool> = match stage {
        Stage::S0 => Box::new(|n: &str| n.starts_with("enc.") || n.starts_with("ctc.")),
        // encoder frozen from Stage I on; CE touches agg/fsq/dec only, CTC
        // touches ctc.* only, so CE gradients cannot reach the CTC head
        Stage::S1 | Stage::S2 => Box::new(|n: &str| {
            n.starts_with("ctc.") || n.starts_with("agg.") || n.starts_with("fsq.") || n.starts_with("dec.")
        }),
    };

    let mut g = Graph::new();
    let b = Binder::bind(&mut g, params, |n| trainable(n))?;
    let frames = g.leaf(&[utt.num_frames, enc.feature_dim], utt.frames.clone(), false)?;
    let hiddens = asr_encode_graph(&mut g, &b, enc, frames)?;
    let h_shallow = hiddens[enc.shallow_layer - 1];
    let h_last = *hiddens.last().unwrap();
    let logp = ctc_head_graph(&mut g, &b, h_last)?;
    let ctc = ctc_loss(&mut g, logp, &utt.transcript)?;
    let ctc_val = if ctc.feasible {
        Some(g.data(ctc.loss)[0] as f64)
    } else {
        None
    };

    let mut terms = Vec::new();
    if ctc.feasible {
        let w = if stage == Stage::S2 { aux_ctc_weight } else { 1.0 };
        if w != 0.0 {
            terms.push(g.scale(ctc.loss, w));
        }
    }

    let ce_val = if stage != Stage::S0 {
        let (transcript, anchors, quantize) = match stage {
            Stage::S1 => (utt.transcript.clone(), oracle_anchors(&utt.char_durations), false),
            Stage::S2 => {
                let ems = greedy_decode(g.data(logp), utt.num_frames, enc.vocab + 1);
                (
                    ems.iter().map(|e| e.symbol).collect(),
                    ems.iter().map(|e| e.anchor).collect(),
                    true,
                )
            }
            Stage::S0 => unreachable!(),
        };
        if transcript.is_empty() {
            None
        } else {
            let (z, _attn) = aggregate_graph(&mut g, &b, enc, &transcript, &anchors, h_shallow, h_last)?;
            let zhat = fsq_pipeline_graph(&mut g, &b, &mcfg.fsq, z, quantize)?;
            let slots = interleave(&transcript, transcript.len(), &utt.units, &mcfg.inter)?;
            let ce = unit_ce_loss(&mut g, &b, &mcfg.dec, &slots, zhat)?;
            terms.push(ce);
            Some(g.data(ce)[0] as f64)
        }
    } else {
        None
    };

    let grads = if terms.is_empty() {
        BTreeMap::new()
    } else {
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t)?;
        }
        g.backward(total)?;
        b.collect_grads(&g)
    };
    Ok((ctc_val, ce_val, grads))
}

#[derive(Clone, Debug, Default)]
pub struct StageStats {
    pub steps: usize,
    /// Per-step mean (loss_ctc, loss_ce); NaN-free by construction.
    pub losses: Vec<(f64, f64)>,
}

impl StageStats {
    /// Moving average of the CTC+CE sum over `window` steps, at a given step.
    pub fn moving_avg(&self, center: usize, window: usize) -> f64 {
        let lo = center.saturating_sub(window / 2);
        let hi = (center + window / 2 + 1).min(self.losses.len());
        let s: f64 = self.losses[lo..hi].iter().map(|(a, b)| a + b).sum();
        s / (hi - lo) as f64
    }
}

pub fn steps_for_stage(cfg: &TrainConfig, n_train: usize) -> usize {
    cfg.epochs_per_stage * n_train.div_ceil(cfg.batch_size)
}

/// Draw one training sample for (stage, step, slot-in-batch). Stage II mixes
/// in silence-joined concatenations of two utterances.
fn draw_sample(
    corpus: &Corpus,
    train_idx: &[usize],
    stage: Stage,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Utterance> {
    let pick = |rng: &mut ChaCha8Rng| train_idx[rng.gen_range(0..train_idx.len())];
    if stage == Stage::S2 && rng.gen_bool(cfg.concat_prob) {
        let a = &corpus.utterances[pick(rng)];
        let b = &corpus.utterances[pick(rng)];
        concat_longform(&corpus.cfg, &corpus.templates, &[a, b], "aug".into())
    } else {
        Ok(corpus.utterances[pick(rng)].clone())
    }
}

/// Run one stage from `start_step` to completion, updating `params`/`opt` in
/// place and appending `step<TAB>stage<TAB>loss_ctc<TAB>loss_ce<TAB>lr` lines.
#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    stage: Stage,
    params: &mut ParamSet,
    opt: &mut AdamW,
    corpus: &Corpus,
    train_idx: &[usize],
    cfg: &TrainConfig,
    mcfg: &ModelConfigs,
    start_step: usize,
    log: &mut dyn std::io::Write,
) -> Result<StageStats> {
    cfg.validate()?;
    if train_idx.is_empty() {
        return Err(Error::Contract("empty training split".into()));
    }
    let total = steps_for_stage(cfg, train_idx.len());
    if cfg.warmup_steps >= total {
        return Err(Error::Config(format!(
            "warmup {} must be < total steps {total}",
            cfg.warmup_steps
        )));
    }
    let mut stats = StageStats::default();
    for step in start_step..total {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, stage.index(), step as u64));
        let mut acc = BTreeMap::new();
        let mut ctc_sum = 0.0f64;
        let mut ctc_n = 0usize;
        let mut ce_sum = 0.0f64;
        let mut ce_n = 0usize;
        let mut contributing = 0usize;
        for _ in 0..cfg.batch_size {
            let utt = draw_sample(corpus, train_idx, stage, cfg, &mut rng)?;
            let (ctc, ce, grads) = sample_losses(params, mcfg, stage, cfg.aux_ctc_weight, &utt)?;
            if let Some(v) = ctc {
                ctc_sum += v;
                ctc_n += 1;
            }
            if let Some(v) = ce {
                ce_sum += v;
                ce_n += 1;
            }
            if !grads.is_empty() {
                contributing += 1;
                add_grads(&mut acc, grads);
            }
        }
        let loss_ctc = if ctc_n > 0 { ctc_sum / ctc_n as f64 } else { 0.0 };
        let loss_ce = if ce_n > 0 { ce_sum / ce_n as f64 } else { 0.0 };
        if !loss_ctc.is_finite() || !loss_ce.is_finite() {
            return Err(Error::Diverged {
                step,
                msg: format!("loss_ctc={loss_ctc} loss_ce={loss_ce}"),
            });
        }
        if contributing > 0 {
            let inv = 1.0f32 / contributing as f32;
            for g in acc.values_mut() {
                for x in g.iter_mut() {
                    *x *= inv;
                }
            }
            let fac = lr_at(step, total, cfg.warmup_steps, 1.0);
            opt.step(params, &acc, cfg.lr_ctc_head * fac, cfg.lr_other * fac)?;
        }
        let lr = cfg.lr_other * lr_at(step, total, cfg.warmup_steps, 1.0);
        writeln!(
            log,
            "{step}\t{}\t{loss_ctc:.6}\t{loss_ce:.6}\t{lr:.6}",
            stage.index()
        )?;
        stats.losses.push((loss_ctc, loss_ce));
    }
    stats.steps = total;
    Ok(stats)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub stats: Vec<(Stage, StageStats)>,
}

/// Full pipeline honoring the ablation flags: Stage 0 always; Stage I unless
/// `no_bistage`; Stage II unless `no_joint` (starting from Stage 0 weights
/// when `no_bistage`).
pub fn train_pipeline(
    corpus: &Corpus,
    cfg: &TrainConfig,
    mcfg: &ModelConfigs,
    log: &mut dyn std::io::Write,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut params = ParamSet::default();
    let mut init = ParamInit::new(&mut params, cfg.seed);
    crate::encoder::init_params(&mut init, &mcfg.enc, &mcfg.fsq);
    crate::unitdec::init_params(&mut init, &mcfg.dec);

    let (train_idx, _) = split_corpus(corpus.utterances.len(), cfg.holdout_frac);
    let mut stats = Vec::new();
    let mut stages = vec![Stage::S0];
    if !cfg.no_bistage {
        stages.push(Stage::S1);
    }
    if !cfg.no_joint {
        stages.push(Stage::S2);
    }
    for stage in stages {
        let mut opt = AdamW::default();
        let s = run_stage(stage, &mut params, &mut opt, corpus, &train_idx, cfg, mcfg, 0, log)?;
        stats.push((stage, s));
    }
    Ok(TrainOutcome { params, stats })
}

// ---- checkpoint format (TSCK) ----

const CKPT_MAGIC: &[u8; 4] = b"TSCK";
const CKPT_VERSION: u16 = 1;

/// Save params + optimizer state + config lines. Optimizer moments live in
/// the same tensor table under `opt.m.` / `opt.v.` prefixes; `opt.t` is a
/// config line. Reload reproduces forward passes and training bit-exactly.
pub fn save_checkpoint(
    path: &Path,
    config: &BTreeMap<String, String>,
    params: &ParamSet,
    opt: &AdamW,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());

    let mut lines: BTreeMap<String, String> = config.clone();
    lines.insert("opt.t".into(), opt.t.to_string());
    buf.extend_from_slice(&(lines.len() as u32).to_le_bytes());
    for (k, v) in &lines {
        if k.contains('=') || k.contains('\n') || v.contains('\n') {
            return Err(Error::Contract(format!("unencodable config key/value {k:?}")));
        }
        let line = format!("{k}={v}");
        buf.extend_from_slice(&(line.len() as u16).to_le_bytes());
        buf.extend_from_slice(line.as_bytes());
    }

    let mut tensors: BTreeMap<String, (Vec<usize>, &[f32])> = BTreeMap::new();
    for (name, p) in &params.params {
        tensors.insert(name.clone(), (p.shape.clone(), &p.data));
    }
    for (name, m) in &opt.m {
        tensors.insert(format!("opt.m.{name}"), (vec![m.len()], m));
    }
    for (name, v) in &opt.v {
        tensors.insert(format!("opt.v.{name}"), (vec![v.len()], v));
    }
    for (name, (shape, data)) in &tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(shape.len() as u8);
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for x in *data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(BTreeMap<String, String>, ParamSet, AdamW)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Decode("truncated checkpoint".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != CKPT_MAGIC {
        return Err(Error::Decode("bad checkpoint magic".into()));
    }
    let ver = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
    if ver != CKPT_VERSION {
        return Err(Error::Decode(format!("unsupported checkpoint version {ver}")));
    }
    let n_lines = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut config = BTreeMap::new();
    for i in 0..n_lines {
        let len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let line = std::str::from_utf8(take(&mut pos, len)?)
            .map_err(|e| Error::Decode(format!("config line {i}: {e}")))?;
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Decode(format!("config line {i} lacks '='")))?;
        config.insert(k.to_string(), v.to_string());
    }

    let mut params = ParamSet::default();
    let mut opt = AdamW {
        t: config
            .remove("opt.t")
            .and_then(|s| s.parse().ok())
            .unwrap_or(0),
        ..AdamW::default()
    };
    while pos < bytes.len() {
        let nlen = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, nlen)?)
            .map_err(|e| Error::Decode(format!("tensor name: {e}")))?
            .to_string();
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut pos, 4 * n)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(rest) = name.strip_prefix("opt.m.") {
            opt.m.insert(rest.to_string(), data);
        } else if let Some(rest) = name.strip_prefix("opt.v.") {
            opt.v.insert(rest.to_string(), data);
        } else {
            params.insert(&name, &shape, data);
        }
    }
    Ok((config, params, opt))
}
