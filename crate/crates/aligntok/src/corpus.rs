//! Deterministic synthetic "speech" corpus: each character has a fixed
//! template vector, utterance frames are noisy copies of the active
//! character's template, and frame-rate target units carry the character id
//! plus an alternating per-occurrence variant.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Read;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug)]
pub struct CorpusConfig {
    pub seed: u64,
    pub alphabet_size: usize,
    pub feature_dim: usize,
    pub frames_per_char: (usize, usize),
    pub noise_sigma: f32,
    pub utterance_len: (usize, usize),
    pub num_utterances: usize,
    pub unit_variants: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            alphabet_size: 8,
            feature_dim: 16,
            frames_per_char: (3, 6),
            noise_sigma: 0.1,
            utterance_len: (4, 12),
            num_utterances: 100,
            unit_variants: 2,
        }
    }
}

impl CorpusConfig {
    /// Unit vocabulary: one unit per (character, variant) pair plus silence.
    pub fn unit_vocab(&self) -> usize {
        self.alphabet_size * self.unit_variants + 1
    }

    pub fn silence_unit(&self) -> usize {
        self.unit_vocab() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphabet_size < 2 {
            return Err(Error::Config("alphabet_size must be >= 2".into()));
        }
        if self.frames_per_char.0 < 1 || self.frames_per_char.0 > self.frames_per_char.1 {
            return Err(Error::Config(format!(
                "invalid frames_per_char range {:?}",
                self.frames_per_char
            )));
        }
        if self.utterance_len.0 < 1 || self.utterance_len.0 > self.utterance_len.1 {
            return Err(Error::Config(format!(
                "invalid utterance_len range {:?}",
                self.utterance_len
            )));
        }
        if self.unit_variants < 1 {
            return Err(Error::Config("unit_variants must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub transcript: Vec<usize>,
    /// Row-major [num_frames, feature_dim].
    pub frames: Vec<f32>,
    pub num_frames: usize,
    pub units: Vec<usize>,
    pub char_durations: Vec<usize>,
}

/// Character templates: rows 0..V are characters, row V is silence.
#[derive(Clone, Debug)]
pub struct Templates {
    pub feature_dim: usize,
    pub rows: Vec<Vec<f32>>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub cfg: CorpusConfig,
    pub templates: Templates,
    pub utterances: Vec<Utterance>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; keeps the dependency surface small and the stream fixed.
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

fn derived_seed(seed: u64, idx: u64) -> u64 {
    seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(idx.wrapping_add(1)))
}

/// Frame-rate unit for character `ch` at its `occurrence`-th appearance in
/// the utterance.
pub fn unit_for(cfg: &CorpusConfig, ch: usize, occurrence: usize) -> usize {
    ch * cfg.unit_variants + (occurrence % cfg.unit_variants)
}

pub fn unit_to_char(cfg: &CorpusConfig, unit: usize) -> Result<Option<usize>> {
    if unit == cfg.silence_unit() {
        Ok(None)
    } else if unit < cfg.alphabet_size * cfg.unit_variants {
        Ok(Some(unit / cfg.unit_variants))
    } else {
        Err(Error::Decode(format!(
            "unit id {unit} out of range for vocab {}",
            cfg.unit_vocab()
        )))
    }
}

pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::with_capacity(cfg.alphabet_size + 1);
    for _ in 0..=cfg.alphabet_size {
        rows.push((0..cfg.feature_dim).map(|_| normal(&mut rng) as f32).collect());
    }
    let templates = Templates {
        feature_dim: cfg.feature_dim,
        rows,
    };

    let mut utterances = Vec::with_capacity(cfg.num_utterances);
    for u in 0..cfg.num_utterances {
        let mut urng = ChaCha8Rng::seed_from_u64(derived_seed(cfg.seed, u as u64));
        utterances.push(generate_utterance(cfg, &templates, &mut urng, format!("utt{u:05}")));
    }
    Ok(Corpus {
        cfg: cfg.clone(),
        templates,
        utterances,
    })
}

fn generate_utterance(
    cfg: &CorpusConfig,
    templates: &Templates,
    rng: &mut ChaCha8Rng,
    id: String,
) -> Utterance {
    let len = rng.gen_range(cfg.utterance_len.0..=cfg.utterance_len.1);
    let mut transcript = Vec::with_capacity(len);
    for i in 0..len {
        // reject immediate repeats so run boundaries are always visible in
        // the frames (exact unit recovery needs them)
        loop {
            let c = rng.gen_range(0..cfg.alphabet_size);
            if i == 0 || transcript[i - 1] != c {
                transcript.push(c);
                break;
            }
        }
    }
    let char_durations: Vec<usize> = (0..len)
        .map(|_| rng.gen_range(cfg.frames_per_char.0..=cfg.frames_per_char.1))
        .collect();

    let mut occurrences = vec![0usize; cfg.alphabet_size];
    let mut units = Vec::new();
    let mut frames = Vec::new();
    for (i, &c) in transcript.iter().enumerate() {
        let unit = unit_for(cfg, c, occurrences[c]);
        occurrences[c] += 1;
        for _ in 0..char_durations[i] {
            units.push(unit);
            for d in 0..cfg.feature_dim {
                let noise = if cfg.noise_sigma > 0.0 {
                    cfg.noise_sigma * normal(rng) as f32
                } else {
                    0.0
                };
                frames.push(templates.rows[c][d] + noise);
            }
        }
    }
    let num_frames = units.len();
    Utterance {
        id,
        transcript,
        frames,
        num_frames,
        units,
        char_durations,
    }
}

/// Deterministic noiseless synthesis: each unit becomes its character's
/// template frame (silence maps to the silence template).
pub fn units_to_frames(cfg: &CorpusConfig, templates: &Templates, units: &[usize]) -> Result<Vec<f32>> {
    let mut frames = Vec::with_capacity(units.len() * cfg.feature_dim);
    for &u in units {
        let row = match unit_to_char(cfg, u)? {
            Some(c) => &templates.rows[c],
            None => &templates.rows[cfg.alphabet_size],
        };
        frames.extend_from_slice(row);
    }
    Ok(frames)
}

/// Nearest-template classification of each frame back to a character id
/// (alphabet_size denotes silence), then unit reconstruction via run
/// boundaries and occurrence alternation. Inverse of `units_to_frames` on
/// noiseless data.
pub fn frames_to_units(cfg: &CorpusConfig, templates: &Templates, frames: &[f32]) -> Vec<usize> {
    let d = cfg.feature_dim;
    let n = frames.len() / d;
    let mut chars = Vec::with_capacity(n);
    for t in 0..n {
        let row = &frames[t * d..(t + 1) * d];
        let mut best = 0usize;
        let mut best_dist = f32::INFINITY;
        for (c, tmpl) in templates.rows.iter().enumerate() {
            let mut dist = 0.0f32;
            for j in 0..d {
                let diff = row[j] - tmpl[j];
                dist += diff * diff;
            }
            if dist < best_dist {
                best_dist = dist;
                best = c;
            }
        }
        chars.push(best);
    }
    let mut occurrences = vec![0usize; cfg.alphabet_size];
    let mut units = Vec::with_capacity(n);
    let mut t = 0usize;
    while t < n {
        let c = chars[t];
        let mut end = t + 1;
        while end < n && chars[end] == c {
            end += 1;
        }
        if c == cfg.alphabet_size {
            for _ in t..end {
                units.push(cfg.silence_unit());
            }
        } else {
            let unit = unit_for(cfg, c, occurrences[c]);
            occurrences[c] += 1;
            for _ in t..end {
                units.push(unit);
            }
        }
        t = end;
    }
    units
}

/// Concatenate utterances into one long sample with a 2-frame silence span
/// between segments. Silence appears in frames and units, never in the
/// transcript or durations.
pub const SILENCE_GAP_FRAMES: usize = 2;

pub fn concat_longform(
    cfg: &CorpusConfig,
    templates: &Templates,
    utterances: &[&Utterance],
    id: String,
) -> Result<Utterance> {
    if utterances.is_empty() {
        return Err(Error::Contract("concat_longform of empty list".into()));
    }
    let mut transcript = Vec::new();
    let mut frames = Vec::new();
    let mut units = Vec::new();
    let mut char_durations = Vec::new();
    let sil_row = &templates.rows[cfg.alphabet_size];
    for (i, utt) in utterances.iter().enumerate() {
        if i > 0 {
            for _ in 0..SILENCE_GAP_FRAMES {
                units.push(cfg.silence_unit());
                frames.extend_from_slice(sil_row);
            }
        }
        transcript.extend_from_slice(&utt.transcript);
        frames.extend_from_slice(&utt.frames);
        units.extend_from_slice(&utt.units);
        char_durations.extend_from_slice(&utt.char_durations);
    }
    let num_frames = units.len();
    Ok(Utterance {
        id,
        transcript,
        frames,
        num_frames,
        units,
        char_durations,
    })
}

/// Build a longform evaluation set of `count` samples, each concatenating `k`
/// utterances sampled (with replacement) from the corpus.
pub fn build_longform_set(corpus: &Corpus, k: usize, count: usize, seed: u64) -> Result<Vec<Utterance>> {
    if k < 2 {
        return Err(Error::Config("longform concatenation needs k >= 2".into()));
    }
    if corpus.utterances.is_empty() {
        return Err(Error::Contract("empty corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(seed, 0xC0CA7));
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let parts: Vec<&Utterance> = (0..k)
            .map(|_| &corpus.utterances[rng.gen_range(0..corpus.utterances.len())])
            .collect();
        out.push(concat_longform(
            &corpus.cfg,
            &corpus.templates,
            &parts,
            format!("long{i:05}"),
        )?);
    }
    Ok(out)
}

// ---- on-disk formats ----

const FRAME_MAGIC: &[u8; 4] = b"TSFR";
const UNIT_MAGIC: &[u8; 4] = b"TSUN";

pub fn write_frames(path: &Path, frames: &[f32], num_frames: usize, dim: usize) -> Result<()> {
    let mut buf = Vec::with_capacity(14 + frames.len() * 4);
    buf.extend_from_slice(FRAME_MAGIC);
    buf.extend_from_slice(&1u16.to_le_bytes());
    buf.extend_from_slice(&(num_frames as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for &f in frames {
        buf.extend_from_slice(&f.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_frames(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let mut f = std::fs::File::open(path)?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    if buf.len() < 14 || &buf[0..4] != FRAME_MAGIC {
        return Err(Error::Decode(format!("{}: not a TSFR frame file", path.display())));
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != 1 {
        return Err(Error::Decode(format!("unsupported TSFR version {version}")));
    }
    let t = u32::from_le_bytes(buf[6..10].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(buf[10..14].try_into().unwrap()) as usize;
    if buf.len() != 14 + t * d * 4 {
        return Err(Error::Decode(format!("{}: truncated frame payload", path.display())));
    }
    let mut frames = Vec::with_capacity(t * d);
    for i in 0..t * d {
        let off = 14 + i * 4;
        frames.push(f32::from_le_bytes(buf[off..off + 4].try_into().unwrap()));
    }
    Ok((frames, t, d))
}

pub fn write_units(path: &Path, units: &[usize]) -> Result<()> {
    let mut buf = Vec::with_capacity(10 + units.len() * 2);
    buf.extend_from_slice(UNIT_MAGIC);
    buf.extend_from_slice(&1u16.to_le_bytes());
    buf.extend_from_slice(&(units.len() as u32).to_le_bytes());
    for &u in units {
        buf.extend_from_slice(&(u as u16).to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_units(path: &Path) -> Result<Vec<usize>> {
    let mut f = std::fs::File::open(path)?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    if buf.len() < 10 || &buf[0..4] != UNIT_MAGIC {
        return Err(Error::Decode(format!("{}: not a TSUN unit file", path.display())));
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != 1 {
        return Err(Error::Decode(format!("unsupported TSUN version {version}")));
    }
    let t = u32::from_le_bytes(buf[6..10].try_into().unwrap()) as usize;
    if buf.len() != 10 + t * 2 {
        return Err(Error::Decode(format!("{}: truncated unit payload", path.display())));
    }
    let mut units = Vec::with_capacity(t);
    for i in 0..t {
        let off = 10 + i * 2;
        units.push(u16::from_le_bytes([buf[off], buf[off + 1]]) as usize);
    }
    Ok(units)
}

fn fmt_ints(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_ints(s: &str, line: usize) -> Result<Vec<usize>> {
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

/// Write an utterance set into a corpus directory under the given manifest
/// name: one TSFR/TSUN pair per utterance plus the manifest itself.
pub fn write_utterance_set(
    dir: &Path,
    manifest_name: &str,
    cfg: &CorpusConfig,
    utterances: &[Utterance],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for utt in utterances {
        let fpath = format!("{}.tsfr", utt.id);
        let upath = format!("{}.tsun", utt.id);
        write_frames(&dir.join(&fpath), &utt.frames, utt.num_frames, cfg.feature_dim)?;
        write_units(&dir.join(&upath), &utt.units)?;
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            utt.id,
            fmt_ints(&utt.transcript),
            fpath,
            upath,
            fmt_ints(&utt.char_durations)
        ));
    }
    std::fs::write(dir.join(manifest_name), manifest)?;
    Ok(())
}

/// Write a corpus directory: `manifest.tsv` plus one TSFR/TSUN pair per
/// utterance, and a `templates` frame file (V+1 rows).
pub fn write_corpus_dir(dir: &Path, cfg: &CorpusConfig, templates: &Templates, utterances: &[Utterance]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut tmpl_flat = Vec::new();
    for row in &templates.rows {
        tmpl_flat.extend_from_slice(row);
    }
    write_frames(&dir.join("templates.tsfr"), &tmpl_flat, templates.rows.len(), templates.feature_dim)?;
    write_utterance_set(dir, "manifest.tsv", cfg, utterances)?;
    let mut cfg_lines: Vec<String> = vec![
        format!("alphabet_size={}", cfg.alphabet_size),
        format!("feature_dim={}", cfg.feature_dim),
        format!("frames_per_char_max={}", cfg.frames_per_char.1),
        format!("frames_per_char_min={}", cfg.frames_per_char.0),
        format!("noise_sigma={}", cfg.noise_sigma),
        format!("num_utterances={}", cfg.num_utterances),
        format!("seed={}", cfg.seed),
        format!("unit_variants={}", cfg.unit_variants),
        format!("utterance_len_max={}", cfg.utterance_len.1),
        format!("utterance_len_min={}", cfg.utterance_len.0),
    ];
    cfg_lines.sort();
    std::fs::write(dir.join("corpus.cfg"), cfg_lines.join("\n") + "\n")?;
    Ok(())
}

pub fn read_corpus_dir(dir: &Path) -> Result<(CorpusConfig, Templates, Vec<Utterance>)> {
    let cfg_text = std::fs::read_to_string(dir.join("corpus.cfg"))?;
    let mut cfg = CorpusConfig::default();
    for (i, line) in cfg_text.lines().enumerate() {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: format!("expected key=value, got {line:?}"),
        })?;
        let bad = |m: &str| Error::Parse {
            line: i + 1,
            msg: m.to_string(),
        };
        match k {
            "alphabet_size" => cfg.alphabet_size = v.parse().map_err(|_| bad("bad int"))?,
            "feature_dim" => cfg.feature_dim = v.parse().map_err(|_| bad("bad int"))?,
            "frames_per_char_min" => cfg.frames_per_char.0 = v.parse().map_err(|_| bad("bad int"))?,
            "frames_per_char_max" => cfg.frames_per_char.1 = v.parse().map_err(|_| bad("bad int"))?,
            "noise_sigma" => cfg.noise_sigma = v.parse().map_err(|_| bad("bad float"))?,
            "num_utterances" => cfg.num_utterances = v.parse().map_err(|_| bad("bad int"))?,
            "seed" => cfg.seed = v.parse().map_err(|_| bad("bad int"))?,
            "unit_variants" => cfg.unit_variants = v.parse().map_err(|_| bad("bad int"))?,
            "utterance_len_min" => cfg.utterance_len.0 = v.parse().map_err(|_| bad("bad int"))?,
            "utterance_len_max" => cfg.utterance_len.1 = v.parse().map_err(|_| bad("bad int"))?,
            _ => {}
        }
    }
    let (tmpl_flat, rows, d) = read_frames(&dir.join("templates.tsfr"))?;
    let templates = Templates {
        feature_dim: d,
        rows: (0..rows).map(|i| tmpl_flat[i * d..(i + 1) * d].to_vec()).collect(),
    };
    let manifest = std::fs::read_to_string(dir.join("manifest.tsv"))?;
    let utterances = read_manifest_entries(dir, &manifest)?;
    Ok((cfg, templates, utterances))
}

pub fn read_manifest_entries(dir: &Path, manifest: &str) -> Result<Vec<Utterance>> {
    let mut utterances = Vec::new();
    for (i, line) in manifest.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected 5 tab-separated fields, got {}", fields.len()),
            });
        }
        let transcript = parse_ints(fields[1], i + 1)?;
        let (frames, t, _d) = read_frames(&dir.join(fields[2]))?;
        let units = read_units(&dir.join(fields[3]))?;
        let char_durations = parse_ints(fields[4], i + 1)?;
        utterances.push(Utterance {
            id: fields[0].to_string(),
            transcript,
            frames,
            num_frames: t,
            units,
            char_durations,
        });
    }
    Ok(utterances)
}

/// Manifest path for the longform set inside a corpus directory.
pub fn longform_manifest_path(dir: &Path) -> PathBuf {
    dir.join("longform-manifest.tsv")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(sigma: f32) -> CorpusConfig {
        CorpusConfig {
            seed: 11,
            num_utterances: 20,
            noise_sigma: sigma,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = small_cfg(0.1);
        let a = generate_corpus(&cfg).unwrap();
        let b = generate_corpus(&cfg).unwrap();
        for (ua, ub) in a.utterances.iter().zip(&b.utterances) {
            assert_eq!(ua.transcript, ub.transcript);
            assert_eq!(ua.units, ub.units);
            assert!(ua.frames.iter().zip(&ub.frames).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn sigma_zero_frames_are_constant_within_a_character() {
        let cfg = small_cfg(0.0);
        let corpus = generate_corpus(&cfg).unwrap();
        let utt = &corpus.utterances[0];
        let d = cfg.feature_dim;
        let mut t = 0;
        for (i, &c) in utt.transcript.iter().enumerate() {
            let first = &utt.frames[t * d..(t + 1) * d];
            assert_eq!(first, &corpus.templates.rows[c][..]);
            for k in 1..utt.char_durations[i] {
                assert_eq!(&utt.frames[(t + k) * d..(t + k + 1) * d], first);
            }
            t += utt.char_durations[i];
        }
    }

    #[test]
    fn duration_bookkeeping_holds_for_whole_corpus() {
        let corpus = generate_corpus(&small_cfg(0.1)).unwrap();
        for utt in &corpus.utterances {
            assert_eq!(utt.char_durations.iter().sum::<usize>(), utt.num_frames);
            assert_eq!(utt.transcript.len(), utt.char_durations.len());
            assert_eq!(utt.units.len(), utt.num_frames);
        }
    }

    #[test]
    fn mean_frame_length_in_expected_range() {
        let cfg = CorpusConfig {
            seed: 7,
            num_utterances: 500,
            ..CorpusConfig::default()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let mean = corpus.utterances.iter().map(|u| u.num_frames).sum::<usize>() as f64
            / corpus.utterances.len() as f64;
        assert!(mean >= (4 * 3) as f64 && mean <= (12 * 6) as f64, "mean={mean}");
    }

    #[test]
    fn units_to_frames_inverts_on_noiseless_corpus() {
        let cfg = small_cfg(0.0);
        let corpus = generate_corpus(&cfg).unwrap();
        for utt in &corpus.utterances {
            let synth = units_to_frames(&cfg, &corpus.templates, &utt.units).unwrap();
            assert_eq!(synth, utt.frames);
            let round = frames_to_units(&cfg, &corpus.templates, &synth);
            assert_eq!(round, utt.units);
        }
    }

    #[test]
    fn units_to_frames_rejects_unknown_unit() {
        let cfg = small_cfg(0.0);
        let corpus = generate_corpus(&cfg).unwrap();
        let err = units_to_frames(&cfg, &corpus.templates, &[cfg.unit_vocab()]);
        assert!(matches!(err, Err(Error::Decode(_))));
        let empty = units_to_frames(&cfg, &corpus.templates, &[]).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn longform_concat_lengths_and_transcripts() {
        let cfg = small_cfg(0.0);
        let corpus = generate_corpus(&cfg).unwrap();
        let u = &corpus.utterances[0];
        let long = concat_longform(&cfg, &corpus.templates, &[u, u], "x".into()).unwrap();
        assert_eq!(long.num_frames, 2 * u.num_frames + SILENCE_GAP_FRAMES);
        assert_eq!(long.transcript.len(), 2 * u.transcript.len());
        let both: Vec<usize> = u.transcript.iter().chain(&u.transcript).copied().collect();
        assert_eq!(long.transcript, both);
        assert!(concat_longform(&cfg, &corpus.templates, &[], "y".into()).is_err());
    }

    #[test]
    fn frame_and_unit_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(0.1);
        let corpus = generate_corpus(&cfg).unwrap();
        let utt = &corpus.utterances[0];
        let fp = dir.path().join("a.tsfr");
        let up = dir.path().join("a.tsun");
        write_frames(&fp, &utt.frames, utt.num_frames, cfg.feature_dim).unwrap();
        write_units(&up, &utt.units).unwrap();
        let (frames, t, d) = read_frames(&fp).unwrap();
        assert_eq!((t, d), (utt.num_frames, cfg.feature_dim));
        assert!(frames.iter().zip(&utt.frames).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(read_units(&up).unwrap(), utt.units);
    }

    #[test]
    fn corpus_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(0.1);
        let corpus = generate_corpus(&cfg).unwrap();
        write_corpus_dir(dir.path(), &cfg, &corpus.templates, &corpus.utterances).unwrap();
        let (cfg2, templates2, utts2) = read_corpus_dir(dir.path()).unwrap();
        assert_eq!(cfg2.seed, cfg.seed);
        assert_eq!(templates2.rows, corpus.templates.rows);
        assert_eq!(utts2.len(), corpus.utterances.len());
        assert_eq!(utts2[3].transcript, corpus.utterances[3].transcript);
        assert_eq!(utts2[3].units, corpus.utterances[3].units);
    }
}
