//! Chunked streaming runtime: encoder -> fsq -> unit decoder, with window
//! management and latency instrumentation (RTF, FCL).

use std::io::Write as _;
use std::time::Instant;

use crate::encoder::{EncoderConfig, EncoderState, TokenEvent};
use crate::error::{Error, Result};
use crate::fsq::FsqConfig;
use crate::model::ParamSet;
use crate::unitdec::{DecoderConfig, GenState, InterleaveConfig};

/// Desk analogs of the 10/15/20/30 s window settings.
pub const WINDOW_SWEEP: [usize; 4] = [64, 96, 128, 192];

#[derive(Clone, Copy, Debug)]
pub struct StreamConfig {
    /// Input chunk size C in frames.
    pub input_chunk_frames: usize,
    /// Window size W in frames; encoder state resets every W frames.
    pub window_frames: usize,
    /// Logical audio rate for RTF accounting.
    pub frame_period_ms: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            input_chunk_frames: 8,
            window_frames: 128,
            frame_period_ms: 20.0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_chunk_frames == 0 {
            return Err(Error::Config("input_chunk_frames must be >= 1".into()));
        }
        if self.input_chunk_frames > self.window_frames {
            return Err(Error::Config(format!(
                "chunk size {} exceeds window {}",
                self.input_chunk_frames, self.window_frames
            )));
        }
        if !(self.frame_period_ms > 0.0) {
            return Err(Error::Config("frame_period_ms must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    InputChunk,
    TokenFinalized,
    UnitChunk,
    Done,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::InputChunk => "INPUT_CHUNK",
            EventKind::TokenFinalized => "TOKEN_FINALIZED",
            EventKind::UnitChunk => "UNIT_CHUNK",
            EventKind::Done => "DONE",
        }
    }
}

#[derive(Clone, Debug)]
pub struct StreamEvent {
    pub kind: EventKind,
    /// Nanoseconds on a single monotonic clock shared by the whole stream.
    pub wall_clock_ns: u64,
    pub logical_frame: usize,
    pub payload: String,
}

/// Monotonic clock for one stream; all event timestamps come from here.
pub struct Clock {
    start: Instant,
}

impl Clock {
    pub fn new() -> Self {
        Self {
            start: Instant::now(),
        }
    }

    pub fn now_ns(&self) -> u64 {
        self.start.elapsed().as_nanos() as u64
    }
}

impl Default for Clock {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Debug, Default)]
pub struct StreamReport {
    /// t_proc/t_audio per stage; absent (not NaN) when t_audio is zero or the
    /// stage did not run.
    pub rtf_encode: Option<f64>,
    pub rtf_decode: Option<f64>,
    pub rtf_total: Option<f64>,
    /// First-output minus first-input wall clock; +inf if no output was ever
    /// produced.
    pub fcl_ms: f64,
    pub encode_ns: u64,
    pub decode_ns: u64,
    pub total_frames: usize,
}

/// Compute the report from stage timings and the first-input/first-output
/// timestamps. RTF excludes source pacing: callers pass compute-only ns.
pub fn measure(
    total_frames: usize,
    frame_period_ms: f64,
    encode_ns: Option<u64>,
    decode_ns: Option<u64>,
    first_input_ns: Option<u64>,
    first_output_ns: Option<u64>,
) -> StreamReport {
    let t_audio_ms = total_frames as f64 * frame_period_ms;
    let rtf = |ns: Option<u64>| -> Option<f64> {
        let ns = ns?;
        if t_audio_ms > 0.0 {
            Some(ns as f64 / 1.0e6 / t_audio_ms)
        } else {
            None
        }
    };
    let rtf_total = if t_audio_ms > 0.0 && (encode_ns.is_some() || decode_ns.is_some()) {
        let sum = encode_ns.unwrap_or(0) + decode_ns.unwrap_or(0);
        Some(sum as f64 / 1.0e6 / t_audio_ms)
    } else {
        None
    };
    let fcl_ms = match (first_input_ns, first_output_ns) {
        (Some(a), Some(b)) => (b.saturating_sub(a)) as f64 / 1.0e6,
        _ => f64::INFINITY,
    };
    StreamReport {
        rtf_encode: rtf(encode_ns),
        rtf_decode: rtf(decode_ns),
        rtf_total,
        fcl_ms,
        encode_ns: encode_ns.unwrap_or(0),
        decode_ns: decode_ns.unwrap_or(0),
        total_frames,
    }
}

/// Ordered source of feature frames, delivered in chunks.
pub trait FrameSource {
    /// Up to `max` frames, flattened row-major; `None` when exhausted.
    fn next_chunk(&mut self, max: usize) -> Result<Option<Vec<f32>>>;
    fn feature_dim(&self) -> usize;
}

/// In-memory frame source over a `[t, dim]` matrix.
pub struct SliceSource<'a> {
    frames: &'a [f32],
    dim: usize,
    pos: usize,
}

impl<'a> SliceSource<'a> {
    pub fn new(frames: &'a [f32], dim: usize) -> Result<Self> {
        if dim == 0 || frames.len() % dim != 0 {
            return Err(Error::Contract(format!(
                "frame buffer of {} floats is not a multiple of dim {dim}",
                frames.len()
            )));
        }
        Ok(Self {
            frames,
            dim,
            pos: 0,
        })
    }
}

impl FrameSource for SliceSource<'_> {
    fn next_chunk(&mut self, max: usize) -> Result<Option<Vec<f32>>> {
        let total = self.frames.len() / self.dim;
        if self.pos >= total {
            return Ok(None);
        }
        let n = max.min(total - self.pos);
        let out = self.frames[self.pos * self.dim..(self.pos + n) * self.dim].to_vec();
        self.pos += n;
        Ok(Some(out))
    }

    fn feature_dim(&self) -> usize {
        self.dim
    }
}

#[derive(Clone, Debug)]
pub struct EncodeStreamOutput {
    pub tokens: Vec<TokenEvent>,
    pub events: Vec<StreamEvent>,
    pub report: StreamReport,
}

fn token_payload(e: &TokenEvent) -> String {
    match e.q {
        Some(q) => format!("token={} anchor={} q={}", e.token, e.anchor, q),
        None => format!("token={} anchor={} q=-", e.token, e.anchor),
    }
}

/// Streaming encode: frames arrive C at a time; finalized tokens pass through
/// the aggregator and FSQ immediately. Encoder state resets every W frames
/// with the pending CTC run carried across the boundary.
pub fn stream_encode(
    params: &ParamSet,
    enc_cfg: &EncoderConfig,
    fsq_cfg: &FsqConfig,
    cfg: &StreamConfig,
    source: &mut dyn FrameSource,
    quantize: bool,
) -> Result<EncodeStreamOutput> {
    cfg.validate()?;
    if source.feature_dim() != enc_cfg.feature_dim {
        return Err(Error::Shape {
            op: "stream_encode",
            left: format!("[{}]", source.feature_dim()),
            right: format!("[{}]", enc_cfg.feature_dim),
        });
    }
    let clock = Clock::new();
    let mut st = EncoderState::new(enc_cfg, quantize);
    let mut tokens = Vec::new();
    let mut events = Vec::new();
    let mut encode_ns = 0u64;
    let mut frame_idx = 0usize;
    let dim = enc_cfg.feature_dim;

    loop {
        let chunk = source
            .next_chunk(cfg.input_chunk_frames)
            .map_err(|e| Error::Contract(format!("frame source at frame {frame_idx}: {e}")))?;
        let Some(chunk) = chunk else { break };
        let n = chunk.len() / dim;
        events.push(StreamEvent {
            kind: EventKind::InputChunk,
            wall_clock_ns: clock.now_ns(),
            logical_frame: frame_idx,
            payload: format!("frames={n}"),
        });
        for f in 0..n {
            if frame_idx > 0 && frame_idx % cfg.window_frames == 0 {
                st.reset_window();
            }
            let t0 = Instant::now();
            let ev = st.push_frame(params, enc_cfg, fsq_cfg, &chunk[f * dim..(f + 1) * dim])?;
            encode_ns += t0.elapsed().as_nanos() as u64;
            if let Some(e) = ev {
                events.push(StreamEvent {
                    kind: EventKind::TokenFinalized,
                    wall_clock_ns: clock.now_ns(),
                    logical_frame: frame_idx,
                    payload: token_payload(&e),
                });
                tokens.push(e);
            }
            frame_idx += 1;
        }
    }

    let t0 = Instant::now();
    let tail = st.flush(params, enc_cfg, fsq_cfg)?;
    encode_ns += t0.elapsed().as_nanos() as u64;
    if let Some(e) = tail {
        events.push(StreamEvent {
            kind: EventKind::TokenFinalized,
            wall_clock_ns: clock.now_ns(),
            logical_frame: frame_idx.saturating_sub(1),
            payload: token_payload(&e),
        });
        tokens.push(e);
    }
    events.push(StreamEvent {
        kind: EventKind::Done,
        wall_clock_ns: clock.now_ns(),
        logical_frame: frame_idx,
        payload: format!("frames={frame_idx} tokens={}", tokens.len()),
    });

    let first_in = events
        .iter()
        .find(|e| e.kind == EventKind::InputChunk)
        .map(|e| e.wall_clock_ns);
    let first_out = events
        .iter()
        .find(|e| e.kind == EventKind::TokenFinalized)
        .map(|e| e.wall_clock_ns);
    let report = measure(
        frame_idx,
        cfg.frame_period_ms,
        Some(encode_ns),
        None,
        first_in,
        first_out,
    );
    Ok(EncodeStreamOutput {
        tokens,
        events,
        report,
    })
}

#[derive(Clone, Debug)]
pub struct DecodeStreamOutput {
    pub units: Vec<usize>,
    pub truncated: bool,
    pub events: Vec<StreamEvent>,
    pub report: StreamReport,
}

/// Streaming decode: aligned tokens arrive in order; unit chunks (up to M
/// units each) are emitted as soon as the interleave schedule allows.
pub fn stream_decode(
    params: &ParamSet,
    dec_cfg: &DecoderConfig,
    inter: &InterleaveConfig,
    tokens: &[TokenEvent],
    u_max: usize,
    frame_period_ms: f64,
    total_frames: usize,
) -> Result<DecodeStreamOutput> {
    let clock = Clock::new();
    let mut st = GenState::new(dec_cfg, inter, u_max);
    let mut events = Vec::new();
    let mut decode_ns = 0u64;
    let mut units = Vec::new();

    let mut emit = |clock: &Clock, events: &mut Vec<StreamEvent>, frame: usize, got: Vec<usize>| {
        if !got.is_empty() {
            events.push(StreamEvent {
                kind: EventKind::UnitChunk,
                wall_clock_ns: clock.now_ns(),
                logical_frame: frame,
                payload: format!(
                    "units={}",
                    got.iter()
                        .map(|u| u.to_string())
                        .collect::<Vec<_>>()
                        .join(",")
                ),
            });
            units.extend(got);
        }
    };

    let mut last_frame = 0usize;
    for e in tokens {
        events.push(StreamEvent {
            kind: EventKind::TokenFinalized,
            wall_clock_ns: clock.now_ns(),
            logical_frame: e.anchor,
            payload: token_payload(e),
        });
        last_frame = e.anchor;
        let t0 = Instant::now();
        let got = st.push_token(params, e.token, &e.zhat)?;
        decode_ns += t0.elapsed().as_nanos() as u64;
        emit(&clock, &mut events, e.anchor, got);
    }
    let t0 = Instant::now();
    let got = st.finish_text(params)?;
    decode_ns += t0.elapsed().as_nanos() as u64;
    emit(&clock, &mut events, last_frame, got);
    let truncated = st.truncated();
    events.push(StreamEvent {
        kind: EventKind::Done,
        wall_clock_ns: clock.now_ns(),
        logical_frame: last_frame,
        payload: format!("units={} truncated={truncated}", units.len()),
    });

    let first_in = events
        .iter()
        .find(|e| e.kind == EventKind::TokenFinalized)
        .map(|e| e.wall_clock_ns);
    let first_out = events
        .iter()
        .find(|e| e.kind == EventKind::UnitChunk)
        .map(|e| e.wall_clock_ns);
    let report = measure(
        total_frames,
        frame_period_ms,
        None,
        Some(decode_ns),
        first_in,
        first_out,
    );
    Ok(DecodeStreamOutput {
        units,
        truncated,
        events,
        report,
    })
}

#[derive(Clone, Debug)]
pub struct LongformOutput {
    pub transcript: Vec<usize>,
    pub anchors: Vec<usize>,
    pub units: Vec<usize>,
    pub truncated: bool,
    pub events: Vec<StreamEvent>,
    pub report: StreamReport,
    /// |len(hyp) - len(ref)| / len(ref) * 100, when a reference length is given.
    pub delta_len_pct: Option<f64>,
}

/// Full streaming pipeline over consecutive W-frame windows: encoder state
/// resets at boundaries (pending CTC run carried), decoder state persists,
/// units from all windows are concatenated.
#[allow(clippy::too_many_arguments)]
pub fn stream_longform(
    params: &ParamSet,
    enc_cfg: &EncoderConfig,
    fsq_cfg: &FsqConfig,
    dec_cfg: &DecoderConfig,
    inter: &InterleaveConfig,
    cfg: &StreamConfig,
    source: &mut dyn FrameSource,
    quantize: bool,
    u_max: usize,
    ref_units_len: Option<usize>,
) -> Result<LongformOutput> {
    cfg.validate()?;
    if source.feature_dim() != enc_cfg.feature_dim {
        return Err(Error::Shape {
            op: "stream_longform",
            left: format!("[{}]", source.feature_dim()),
            right: format!("[{}]", enc_cfg.feature_dim),
        });
    }
    let clock = Clock::new();
    let mut enc = EncoderState::new(enc_cfg, quantize);
    let mut dec = GenState::new(dec_cfg, inter, u_max);
    let mut events = Vec::new();
    let mut transcript = Vec::new();
    let mut anchors = Vec::new();
    let mut units = Vec::new();
    let mut encode_ns = 0u64;
    let mut decode_ns = 0u64;
    let mut frame_idx = 0usize;
    let dim = enc_cfg.feature_dim;

    let mut consume_token =
        |clock: &Clock,
         events: &mut Vec<StreamEvent>,
         dec: &mut GenState,
         decode_ns: &mut u64,
         frame: usize,
         e: TokenEvent|
         -> Result<()> {
            events.push(StreamEvent {
                kind: EventKind::TokenFinalized,
                wall_clock_ns: clock.now_ns(),
                logical_frame: frame,
                payload: token_payload(&e),
            });
            transcript.push(e.token);
            anchors.push(e.anchor);
            let t0 = Instant::now();
            let got = dec.push_token(params, e.token, &e.zhat)?;
            *decode_ns += t0.elapsed().as_nanos() as u64;
            if !got.is_empty() {
                events.push(StreamEvent {
                    kind: EventKind::UnitChunk,
                    wall_clock_ns: clock.now_ns(),
                    logical_frame: frame,
                    payload: format!(
                        "units={}",
                        got.iter()
                            .map(|u| u.to_string())
                            .collect::<Vec<_>>()
                            .join(",")
                    ),
                });
                units.extend(got);
            }
            Ok(())
        };

    loop {
        let chunk = source
            .next_chunk(cfg.input_chunk_frames)
            .map_err(|e| Error::Contract(format!("frame source at frame {frame_idx}: {e}")))?;
        let Some(chunk) = chunk else { break };
        let n = chunk.len() / dim;
        events.push(StreamEvent {
            kind: EventKind::InputChunk,
            wall_clock_ns: clock.now_ns(),
            logical_frame: frame_idx,
            payload: format!("frames={n}"),
        });
        for f in 0..n {
            if frame_idx > 0 && frame_idx % cfg.window_frames == 0 {
                enc.reset_window();
            }
            let t0 = Instant::now();
            let ev = enc.push_frame(params, enc_cfg, fsq_cfg, &chunk[f * dim..(f + 1) * dim])?;
            encode_ns += t0.elapsed().as_nanos() as u64;
            if let Some(e) = ev {
                consume_token(&clock, &mut events, &mut dec, &mut decode_ns, frame_idx, e)?;
            }
            frame_idx += 1;
        }
    }

    let t0 = Instant::now();
    let tail = enc.flush(params, enc_cfg, fsq_cfg)?;
    encode_ns += t0.elapsed().as_nanos() as u64;
    if let Some(e) = tail {
        consume_token(
            &clock,
            &mut events,
            &mut dec,
            &mut decode_ns,
            frame_idx.saturating_sub(1),
            e,
        )?;
    }
    let t0 = Instant::now();
    let got = dec.finish_text(params)?;
    decode_ns += t0.elapsed().as_nanos() as u64;
    if !got.is_empty() {
        events.push(StreamEvent {
            kind: EventKind::UnitChunk,
            wall_clock_ns: clock.now_ns(),
            logical_frame: frame_idx.saturating_sub(1),
            payload: format!(
                "units={}",
                got.iter()
                    .map(|u| u.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            ),
        });
        units.extend(got);
    }
    let truncated = dec.truncated();
    events.push(StreamEvent {
        kind: EventKind::Done,
        wall_clock_ns: clock.now_ns(),
        logical_frame: frame_idx,
        payload: format!(
            "frames={frame_idx} tokens={} units={} truncated={truncated}",
            transcript.len(),
            units.len()
        ),
    });

    let first_in = events
        .iter()
        .find(|e| e.kind == EventKind::InputChunk)
        .map(|e| e.wall_clock_ns);
    let first_out = events
        .iter()
        .find(|e| e.kind == EventKind::UnitChunk)
        .map(|e| e.wall_clock_ns);
    let report = measure(
        frame_idx,
        cfg.frame_period_ms,
        Some(encode_ns),
        Some(decode_ns),
        first_in,
        first_out,
    );
    let delta_len_pct = ref_units_len.map(|r| {
        if r == 0 {
            f64::INFINITY
        } else {
            (units.len() as f64 - r as f64).abs() / r as f64 * 100.0
        }
    });
    Ok(LongformOutput {
        transcript,
        anchors,
        units,
        truncated,
        events,
        report,
        delta_len_pct,
    })
}

/// Line-delimited event trace: `wall_clock_ns<TAB>kind<TAB>logical_frame<TAB>payload`.
pub fn write_trace(path: &std::path::Path, events: &[StreamEvent]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in events {
        writeln!(
            f,
            "{}\t{}\t{}\t{}",
            e.wall_clock_ns,
            e.kind.as_str(),
            e.logical_frame,
            e.payload
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Parse a trace file back into (ns, kind, logical_frame, payload) tuples.
pub fn read_trace(path: &std::path::Path) -> Result<Vec<(u64, String, usize, String)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut it = line.splitn(4, '\t');
        let parse = |s: Option<&str>, what: &str| {
            s.map(str::to_string).ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("missing {what}"),
            })
        };
        let ns: u64 = parse(it.next(), "timestamp")?
            .parse()
            .map_err(|e| Error::Parse {
                line: i + 1,
                msg: format!("bad timestamp: {e}"),
            })?;
        let kind = parse(it.next(), "kind")?;
        let frame: usize = parse(it.next(), "logical_frame")?
            .parse()
            .map_err(|e| Error::Parse {
                line: i + 1,
                msg: format!("bad logical_frame: {e}"),
            })?;
        let payload = parse(it.next(), "payload")?;
        out.push((ns, kind, frame, payload));
    }
    Ok(out)
}
