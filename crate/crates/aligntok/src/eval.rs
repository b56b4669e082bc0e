//! Reconstruction metrics: token error rate (edit distance over exact
//! tokens), duration consistency under a frame tolerance, ΔLen, codebook
//! utilization, and full-corpus report assembly.

use crate::corpus::{unit_to_char, CorpusConfig, Utterance};
use crate::encoder::{encode_offline, TranscriptSource};
use crate::error::{Error, Result};
use crate::fsq::codebook_utilization;
use crate::model::ParamSet;
use crate::train::{oracle_anchors, ModelConfigs};
use crate::unitdec::generate_offline;

/// Levenshtein distance with unit sub/ins/del costs.
pub fn edit_distance(r: &[usize], h: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=h.len()).collect();
    let mut cur = vec![0usize; h.len() + 1];
    for i in 1..=r.len() {
        cur[0] = i;
        for j in 1..=h.len() {
            let sub = prev[j - 1] + usize::from(r[i - 1] != h[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[h.len()]
}

/// Edit distance divided by reference length.
pub fn token_error_rate(r: &[usize], h: &[usize]) -> Result<f64> {
    if r.is_empty() {
        return Err(Error::Contract("token_error_rate over empty reference".into()));
    }
    Ok(edit_distance(r, h) as f64 / r.len() as f64)
}

/// DP alignment backtrace: pairs of (ref index, hyp index); `None` marks an
/// insertion/deletion partner.
pub fn align(r: &[usize], h: &[usize]) -> Vec<(Option<usize>, Option<usize>)> {
    let n = r.len();
    let m = h.len();
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut pairs = Vec::new();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]) {
            pairs.push((Some(i - 1), Some(j - 1)));
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            pairs.push((Some(i - 1), None));
            i -= 1;
        } else {
            pairs.push((None, Some(j - 1)));
            j -= 1;
        }
    }
    pairs.reverse();
    pairs
}

/// Fraction of reference characters whose aligned hypothesis character is the
/// same symbol with |Δduration| <= tol frames. Unmatched reference characters
/// (deletions, substitutions) count as failures.
pub fn duration_consistency(
    ref_chars: &[usize],
    ref_durations: &[usize],
    hyp_chars: &[usize],
    hyp_durations: &[usize],
    tol_frames: usize,
) -> Result<f64> {
    if ref_chars.len() != ref_durations.len() || hyp_chars.len() != hyp_durations.len() {
        return Err(Error::Contract("chars/durations length mismatch".into()));
    }
    if ref_chars.is_empty() {
        return Err(Error::Contract("duration_consistency over empty reference".into()));
    }
    let mut matched = 0usize;
    for (ri, hi) in align(ref_chars, hyp_chars) {
        if let (Some(ri), Some(hi)) = (ri, hi) {
            if ref_chars[ri] == hyp_chars[hi] {
                let d = ref_durations[ri].abs_diff(hyp_durations[hi]);
                if d <= tol_frames {
                    matched += 1;
                }
            }
        }
    }
    Ok(matched as f64 / ref_chars.len() as f64)
}

/// |len(hyp) - len(ref)| / len(ref) * 100.
pub fn delta_len(r: &[usize], h: &[usize]) -> Result<f64> {
    if r.is_empty() {
        return Err(Error::Contract("delta_len over empty reference".into()));
    }
    Ok((h.len() as f64 - r.len() as f64).abs() / r.len() as f64 * 100.0)
}

/// Collapse a frame-rate unit sequence into (character, run duration) pairs,
/// dropping silence runs. Inverse view used for TER and duration metrics.
pub fn unit_runs(cfg: &CorpusConfig, units: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut chars = Vec::new();
    let mut durs = Vec::new();
    let mut i = 0usize;
    while i < units.len() {
        let u = units[i];
        let mut end = i + 1;
        while end < units.len() && units[end] == u {
            end += 1;
        }
        if let Some(c) = unit_to_char(cfg, u)? {
            chars.push(c);
            durs.push(end - i);
        }
        i = end;
    }
    Ok((chars, durs))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// Built-in CTC transcripts and anchors.
    Ctc,
    /// Ground-truth transcripts, proportional anchors (external-ASR analog).
    ExtOracle,
}

impl EvalMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            EvalMode::Ctc => "ctc",
            EvalMode::ExtOracle => "ext",
        }
    }
}

pub const DURATION_TOL_FRAMES: usize = 2;

#[derive(Clone, Debug)]
pub struct UttEval {
    pub id: String,
    pub ter: f64,
    pub duration_consistency: f64,
    pub delta_len_pct: f64,
    pub ref_tokens: usize,
    pub edits: usize,
    pub truncated: bool,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub mode: EvalMode,
    /// Corpus-level: total edits / total reference tokens.
    pub ter: f64,
    pub duration_consistency: f64,
    pub delta_len_mean: f64,
    pub delta_len_std: f64,
    pub codebook_utilization: Option<f64>,
    /// Perceptual metrics have no ground truth here; explicit absence.
    pub utmos: Option<f64>,
    pub speaker_similarity: Option<f64>,
    pub per_utterance: Vec<UttEval>,
}

impl EvalReport {
    /// Canonical `key=value` block.
    pub fn text(&self) -> String {
        let fmt_opt = |o: Option<f64>| match o {
            Some(v) => format!("{v:.6}"),
            None => "absent".to_string(),
        };
        format!(
            "mode={}\nter={:.6}\nduration_consistency={:.6}\ndelta_len_mean={:.6}\ndelta_len_std={:.6}\ncodebook_utilization={}\nutmos={}\nspeaker_similarity={}\nutterances={}\n",
            self.mode.as_str(),
            self.ter,
            self.duration_consistency,
            self.delta_len_mean,
            self.delta_len_std,
            fmt_opt(self.codebook_utilization),
            fmt_opt(self.utmos),
            fmt_opt(self.speaker_similarity),
            self.per_utterance.len()
        )
    }

    /// Per-utterance table: `id<TAB>ter<TAB>dc<TAB>delta_len<TAB>ref_tokens<TAB>truncated`.
    pub fn table(&self) -> String {
        let mut out = String::new();
        for u in &self.per_utterance {
            out.push_str(&format!(
                "{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\n",
                u.id, u.ter, u.duration_consistency, u.delta_len_pct, u.ref_tokens, u.truncated
            ));
        }
        out
    }

    /// Comma-separated columns for spreadsheet import.
    pub fn csv(&self) -> String {
        let mut out = String::from("id,ter,duration_consistency,delta_len_pct,ref_tokens,truncated\n");
        for u in &self.per_utterance {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{},{}\n",
                u.id, u.ter, u.duration_consistency, u.delta_len_pct, u.ref_tokens, u.truncated
            ));
        }
        out
    }
}

/// Maximum generated units per aligned token (slot-cap input for generation).
pub fn u_max_for(corpus_cfg: &CorpusConfig) -> usize {
    corpus_cfg.frames_per_char.1
}

/// Full encode -> quantize -> decode evaluation over a set of utterances.
pub fn evaluate(
    params: &ParamSet,
    mcfg: &ModelConfigs,
    corpus_cfg: &CorpusConfig,
    utterances: &[Utterance],
    mode: EvalMode,
) -> Result<EvalReport> {
    if utterances.is_empty() {
        return Err(Error::Contract("evaluate over empty split".into()));
    }
    let u_max = u_max_for(corpus_cfg);
    let mut per = Vec::with_capacity(utterances.len());
    let mut total_edits = 0usize;
    let mut total_ref = 0usize;
    let mut dc_sum = 0.0f64;
    let mut deltas = Vec::with_capacity(utterances.len());
    let mut q_all = Vec::new();

    for utt in utterances {
        let source = match mode {
            EvalMode::Ctc => TranscriptSource::Ctc,
            EvalMode::ExtOracle => TranscriptSource::Ext {
                transcript: utt.transcript.clone(),
                anchors: None,
            },
        };
        let enc = encode_offline(
            params,
            &mcfg.enc,
            &mcfg.fsq,
            &utt.frames,
            utt.num_frames,
            &source,
            true,
        )?;
        if let Some(q) = &enc.q {
            q_all.extend_from_slice(q);
        }
        let gen = generate_offline(
            params,
            &mcfg.dec,
            &mcfg.inter,
            &enc.transcript,
            &enc.zhat,
            u_max,
        )?;
        let (hyp_chars, hyp_durs) = unit_runs(corpus_cfg, &gen.units)?;
        let edits = edit_distance(&utt.transcript, &hyp_chars);
        let ter = edits as f64 / utt.transcript.len() as f64;
        let dc = duration_consistency(
            &utt.transcript,
            &utt.char_durations,
            &hyp_chars,
            &hyp_durs,
            DURATION_TOL_FRAMES,
        )?;
        let dl = delta_len(&utt.units, &gen.units)?;
        total_edits += edits;
        total_ref += utt.transcript.len();
        dc_sum += dc;
        deltas.push(dl);
        per.push(UttEval {
            id: utt.id.clone(),
            ter,
            duration_consistency: dc,
            delta_len_pct: dl,
            ref_tokens: utt.transcript.len(),
            edits,
            truncated: gen.truncated,
        });
    }

    let n = per.len() as f64;
    let delta_mean = deltas.iter().sum::<f64>() / n;
    let delta_std = (deltas.iter().map(|d| (d - delta_mean).powi(2)).sum::<f64>() / n).sqrt();
    let utilization = if q_all.is_empty() {
        None
    } else {
        Some(codebook_utilization(&mcfg.fsq, &q_all)?)
    };
    Ok(EvalReport {
        mode,
        ter: total_edits as f64 / total_ref as f64,
        duration_consistency: dc_sum / n,
        delta_len_mean: delta_mean,
        delta_len_std: delta_std,
        codebook_utilization: utilization,
        utmos: None,
        speaker_similarity: None,
        per_utterance: per,
    })
}

/// Teacher-forced unit accuracy: fraction of unit/EOS targets whose argmax
/// matches under the Stage-I forward (oracle transcript + anchors, FSQ
/// bypassed) or the Stage-II forward (CTC transcript, FSQ active).
pub fn teacher_forced_unit_accuracy(
    params: &ParamSet,
    mcfg: &ModelConfigs,
    utterances: &[Utterance],
    oracle: bool,
) -> Result<f64> {
    use crate::autodiff::Graph;
    use crate::ctc::greedy_decode;
    use crate::encoder::{aggregate_graph, asr_encode_graph, ctc_head_graph, fsq_pipeline_graph};
    use crate::model::Binder;
    use crate::unitdec::{decoder_forward, interleave};

    if utterances.is_empty() {
        return Err(Error::Contract("unit accuracy over empty split".into()));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for utt in utterances {
        let mut g = Graph::new();
        let b = Binder::bind(&mut g, params, |_| false)?;
        let frames = g.leaf(&[utt.num_frames, mcfg.enc.feature_dim], utt.frames.clone(), false)?;
        let hiddens = asr_encode_graph(&mut g, &b, &mcfg.enc, frames)?;
        let h_shallow = hiddens[mcfg.enc.shallow_layer - 1];
        let h_last = *hiddens.last().unwrap();
        let (transcript, anchors, quantize) = if oracle {
            (utt.transcript.clone(), oracle_anchors(&utt.char_durations), false)
        } else {
            let logp = ctc_head_graph(&mut g, &b, h_last)?;
            let ems = greedy_decode(g.data(logp), utt.num_frames, mcfg.enc.vocab + 1);
            (
                ems.iter().map(|e| e.symbol).collect(),
                ems.iter().map(|e| e.anchor).collect(),
                true,
            )
        };
        if transcript.is_empty() {
            total += utt.units.len() + 1;
            continue;
        }
        let (z, _) = aggregate_graph(&mut g, &b, &mcfg.enc, &transcript, &anchors, h_shallow, h_last)?;
        let zhat = fsq_pipeline_graph(&mut g, &b, &mcfg.fsq, z, quantize)?;
        let slots = interleave(&transcript, transcript.len(), &utt.units, &mcfg.inter)?;
        let (logits, targets) = decoder_forward(&mut g, &b, &mcfg.dec, &slots, zhat)?;
        let w = mcfg.dec.unit_vocab + 1;
        for (pos, class) in targets {
            let row = &g.data(logits)[pos * w..(pos + 1) * w];
            let mut best = 0usize;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            hits += usize::from(best == class);
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive recursive edit distance for small sequences.
    fn brute_edit(r: &[usize], h: &[usize]) -> usize {
        if r.is_empty() {
            return h.len();
        }
        if h.is_empty() {
            return r.len();
        }
        let sub = brute_edit(&r[1..], &h[1..]) + usize::from(r[0] != h[0]);
        let del = brute_edit(&r[1..], h) + 1;
        let ins = brute_edit(r, &h[1..]) + 1;
        sub.min(del).min(ins)
    }

    #[test]
    fn ter_trivial_cases() {
        assert_eq!(token_error_rate(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        let v = token_error_rate(&[0, 1, 2], &[0, 2]).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
        assert!(token_error_rate(&[], &[1]).is_err());
    }

    #[test]
    fn edit_distance_matches_brute_force_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..300 {
            let n = rng.gen_range(0..=6);
            let m = rng.gen_range(0..=6);
            let r: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let h: Vec<usize> = (0..m).map(|_| rng.gen_range(0..3)).collect();
            assert_eq!(edit_distance(&r, &h), brute_edit(&r, &h), "{r:?} vs {h:?}");
        }
    }

    #[test]
    fn alignment_cost_matches_distance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(22);
        for _ in 0..100 {
            let r: Vec<usize> = (0..rng.gen_range(1..8)).map(|_| rng.gen_range(0..3)).collect();
            let h: Vec<usize> = (0..rng.gen_range(1..8)).map(|_| rng.gen_range(0..3)).collect();
            let pairs = align(&r, &h);
            let mut cost = 0usize;
            let mut ri = 0usize;
            let mut hi = 0usize;
            for (a, b) in &pairs {
                match (a, b) {
                    (Some(i), Some(j)) => {
                        assert_eq!((*i, *j), (ri, hi));
                        cost += usize::from(r[*i] != h[*j]);
                        ri += 1;
                        hi += 1;
                    }
                    (Some(i), None) => {
                        assert_eq!(*i, ri);
                        cost += 1;
                        ri += 1;
                    }
                    (None, Some(j)) => {
                        assert_eq!(*j, hi);
                        cost += 1;
                        hi += 1;
                    }
                    (None, None) => unreachable!(),
                }
            }
            assert_eq!((ri, hi), (r.len(), h.len()));
            assert_eq!(cost, edit_distance(&r, &h));
        }
    }

    #[test]
    fn duration_consistency_trivial_cases() {
        let chars = [0, 1, 2];
        let durs = [3, 4, 5];
        assert_eq!(
            duration_consistency(&chars, &durs, &chars, &durs, 2).unwrap(),
            1.0
        );
        let shifted: Vec<usize> = durs.iter().map(|d| d + 3).collect();
        assert_eq!(
            duration_consistency(&chars, &durs, &chars, &shifted, 2).unwrap(),
            0.0
        );
        // monotone nonincreasing as tol shrinks
        let hyp = [3usize, 6, 5];
        let mut prev = f64::INFINITY;
        for tol in (0..4).rev() {
            let v = duration_consistency(&chars, &durs, &chars, &hyp, tol).unwrap();
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn delta_len_arithmetic() {
        let r: Vec<usize> = vec![0; 100];
        let h: Vec<usize> = vec![0; 103];
        assert!((delta_len(&r, &h).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(delta_len(&r, &r).unwrap(), 0.0);
        assert!(delta_len(&[], &h).is_err());
    }

    #[test]
    fn unit_runs_collapse_and_skip_silence() {
        let cfg = CorpusConfig::default(); // V=8, variants=2, silence=16
        let units = [0, 0, 0, 16, 16, 3, 3, 1, 1, 1];
        let (chars, durs) = unit_runs(&cfg, &units).unwrap();
        assert_eq!(chars, vec![0, 1, 0]); // unit 3 = char 1 variant 1
        assert_eq!(durs, vec![3, 2, 3]);
    }

    #[test]
    fn report_aggregation_matches_per_utterance_recomputation() {
        use crate::corpus::{generate_corpus, CorpusConfig};
        use crate::model::{ParamInit, ParamSet};
        let corpus = generate_corpus(&CorpusConfig {
            seed: 6,
            alphabet_size: 3,
            num_utterances: 6,
            utterance_len: (2, 4),
            frames_per_char: (2, 3),
            ..CorpusConfig::default()
        })
        .unwrap();
        let mut mcfg = ModelConfigs::default();
        mcfg.enc.vocab = 3;
        mcfg.dec.text_vocab = 3;
        mcfg.dec.unit_vocab = 7;
        let mut params = ParamSet::default();
        let mut init = ParamInit::new(&mut params, 2);
        crate::encoder::init_params(&mut init, &mcfg.enc, &mcfg.fsq);
        crate::unitdec::init_params(&mut init, &mcfg.dec);

        let rep = evaluate(&params, &mcfg, &corpus.cfg, &corpus.utterances, EvalMode::ExtOracle)
            .unwrap();
        let edits: usize = rep.per_utterance.iter().map(|u| u.edits).sum();
        let refs: usize = rep.per_utterance.iter().map(|u| u.ref_tokens).sum();
        assert!((rep.ter - edits as f64 / refs as f64).abs() < 1e-12);
        let mean = rep.per_utterance.iter().map(|u| u.delta_len_pct).sum::<f64>()
            / rep.per_utterance.len() as f64;
        assert!((rep.delta_len_mean - mean).abs() < 1e-9);
        assert!(rep.utmos.is_none() && rep.speaker_similarity.is_none());
        assert!(rep.text().contains("utmos=absent"));

        // reruns are bit-identical
        let rep2 = evaluate(&params, &mcfg, &corpus.cfg, &corpus.utterances, EvalMode::ExtOracle)
            .unwrap();
        assert_eq!(rep.text(), rep2.text());
        assert_eq!(rep.table(), rep2.table());
        assert!(rep.csv().starts_with("id,ter,"));
    }
}
