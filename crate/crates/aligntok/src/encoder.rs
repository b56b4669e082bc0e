//! Causal encoder stack: input projection + L causal transformer blocks,
//! CTC head, and the text-aligned aggregator (one cross-attention block,
//! anchor-causal, lookahead 0). Offline (graph) and incremental paths share
//! kernels, so their outputs are bit-identical.

use crate::autodiff::{Graph, TensorId};
use crate::ctc::{greedy_decode, Emission, StreamingDecoder};
use crate::error::{Error, Result};
use crate::fsq::{self, FsqConfig};
use crate::kernels;
use crate::model::{Binder, BlockCache, ParamInit, ParamSet};

#[derive(Clone, Debug)]
pub struct EncoderConfig {
    pub num_layers: usize,
    /// 1-based index of the shallow hidden fed to the aggregator.
    pub shallow_layer: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub feature_dim: usize,
    pub vocab: usize,
    pub aligned_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            shallow_layer: 1,
            d_model: 32,
            num_heads: 2,
            feature_dim: 16,
            vocab: 8,
            aligned_dim: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shallow_layer < 1 || self.shallow_layer >= self.num_layers {
            return Err(Error::Config(format!(
                "shallow_layer must satisfy 1 <= l < L, got l={} L={}",
                self.shallow_layer, self.num_layers
            )));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.num_heads
            )));
        }
        Ok(())
    }
}

pub fn init_params(init: &mut ParamInit, cfg: &EncoderConfig, fsq_cfg: &FsqConfig) {
    init.matrix("enc.in_proj.w", cfg.feature_dim, cfg.d_model);
    init.zeros("enc.in_proj.b", cfg.d_model);
    for i in 0..cfg.num_layers {
        init.block(&format!("enc.block{i}"), cfg.d_model);
    }
    init.matrix("ctc.w", cfg.d_model, cfg.vocab + 1);
    init.zeros("ctc.b", cfg.vocab + 1);
    init.embedding("agg.text_emb", cfg.vocab, cfg.d_model);
    // Identity-leaning init keeps the query's anchor posenc legible in z at
    // step 0; fsq.down/up start as a posenc pair selection and its transpose.
    // The decoder can only learn to read duration out of ẑ if the phase
    // channel exists before it commits to a duration prior; a fully random
    // init buries the channel and training never recovers it.
    init.matrix_eye("agg.wq", cfg.d_model, cfg.d_model);
    init.matrix("agg.wk", 2 * cfg.d_model, cfg.d_model);
    init.matrix("agg.wv", 2 * cfg.d_model, cfg.d_model);
    init.matrix_eye("agg.wo", cfg.d_model, cfg.aligned_dim);
    init.zeros("agg.bo", cfg.aligned_dim);
    let sel = posenc_pair_selection(cfg.aligned_dim, fsq_cfg.k());
    init.matrix_select("fsq.down.w", cfg.aligned_dim, fsq_cfg.k(), &sel, false);
    init.zeros("fsq.down.b", fsq_cfg.k());
    init.matrix_select("fsq.up.w", fsq_cfg.k(), cfg.aligned_dim, &sel, true);
    init.zeros("fsq.up.b", cfg.aligned_dim);
}

/// Dims of `k/2` (sin, cos) posenc pairs spread evenly over the `d/2` pairs
/// of a d-dim code; the seed wiring for fsq.down/up.
fn posenc_pair_selection(d: usize, k: usize) -> Vec<usize> {
    let avail = d / 2;
    let np = (k / 2).max(1).min(avail);
    let mut sel = Vec::with_capacity(np * 2);
    for i in 0..np {
        let p = if np > 1 { i * (avail - 1) / (np - 1) } else { 0 };
        sel.push(2 * p);
        sel.push(2 * p + 1);
    }
    sel.truncate(k);
    sel
}

fn posenc_rows(base: usize, t: usize, dim: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(t * dim);
    for i in 0..t {
        out.extend(kernels::periodic_posenc(base + i, dim));
    }
    out
}

/// Input projection + positional features + L causal blocks; returns every
/// layer's hidden matrix [T, d_model].
pub fn asr_encode_graph(
    g: &mut Graph,
    b: &Binder,
    cfg: &EncoderConfig,
    frames: TensorId,
) -> Result<Vec<TensorId>> {
    let shape = g.shape(frames).to_vec();
    if shape.len() != 2 || shape[1] != cfg.feature_dim {
        return Err(Error::Shape {
            op: "asr_encode",
            left: format!("{shape:?}"),
            right: format!("[T, {}]", cfg.feature_dim),
        });
    }
    let t = shape[0];
    let proj = g.matmul(frames, b.id("enc.in_proj.w")?)?;
    let mut x = g.add_bias(proj, b.id("enc.in_proj.b")?)?;
    x = g.add_const(x, &posenc_rows(0, t, cfg.d_model))?;
    let mut hiddens = Vec::with_capacity(cfg.num_layers);
    for i in 0..cfg.num_layers {
        x = crate::model::transformer_block(g, b, &format!("enc.block{i}"), x, cfg.num_heads)?;
        hiddens.push(x);
    }
    Ok(hiddens)
}

/// Linear head + log-softmax over V+1 classes (blank last).
pub fn ctc_head_graph(g: &mut Graph, b: &Binder, h_last: TensorId) -> Result<TensorId> {
    let logits = g.matmul(h_last, b.id("ctc.w")?)?;
    let biased = g.add_bias(logits, b.id("ctc.b")?)?;
    Ok(g.log_softmax_rows(biased))
}

/// Anchor-causal cross-attention pooling: one latent row per transcript
/// token. Returns (Z [n, d_z], attention map [n, T]).
pub fn aggregate_graph(
    g: &mut Graph,
    b: &Binder,
    cfg: &EncoderConfig,
    s_hat: &[usize],
    anchors: &[usize],
    h_shallow: TensorId,
    h_last: TensorId,
) -> Result<(TensorId, TensorId)> {
    let t = g.shape(h_last)[0];
    if s_hat.len() != anchors.len() {
        return Err(Error::Contract(format!(
            "{} tokens vs {} anchors",
            s_hat.len(),
            anchors.len()
        )));
    }
    for (i, &a) in anchors.iter().enumerate() {
        if a >= t {
            return Err(Error::Contract(format!("anchor {a} out of range [0, {t})")));
        }
        if i > 0 && anchors[i - 1] >= a {
            return Err(Error::Contract("anchors must be strictly increasing".into()));
        }
    }
    let n = s_hat.len();
    let emb = g.embedding(b.id("agg.text_emb")?, s_hat)?;
    let mut pe = Vec::with_capacity(n * cfg.d_model);
    for &a in anchors {
        pe.extend(kernels::periodic_posenc(a, cfg.d_model));
    }
    let qin = g.add_const(emb, &pe)?;
    let q = g.matmul(qin, b.id("agg.wq")?)?;
    let hv = g.concat_cols(&[h_shallow, h_last])?;
    let k = g.matmul(hv, b.id("agg.wk")?)?;
    let v = g.matmul(hv, b.id("agg.wv")?)?;
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / (cfg.d_model as f32).sqrt());
    // query i sees frames <= anchor_i (lookahead 0)
    let mut mask = vec![0.0f32; n * t];
    for (i, &a) in anchors.iter().enumerate() {
        for j in (a + 1)..t {
            mask[i * t + j] = f32::NEG_INFINITY;
        }
    }
    let masked = g.add_const(scaled, &mask)?;
    let attn = g.softmax_rows(masked);
    let pooled = g.matmul(attn, v)?;
    let summed = g.add(pooled, q)?;
    let zo = g.matmul(summed, b.id("agg.wo")?)?;
    let z = g.add_bias(zo, b.id("agg.bo")?)?;
    Ok((z, attn))
}

/// Down-project, optionally FSQ-quantize (straight-through), up-project.
/// With `quantize` false (Stage I bypass) the rounding is skipped but the
/// projections stay active, keeping decoder input dimensions stable.
pub fn fsq_pipeline_graph(
    g: &mut Graph,
    b: &Binder,
    fsq_cfg: &FsqConfig,
    z: TensorId,
    quantize: bool,
) -> Result<TensorId> {
    let down = g.matmul(z, b.id("fsq.down.w")?)?;
    let z_low = g.add_bias(down, b.id("fsq.down.b")?)?;
    let mid = if quantize {
        fsq::fsq_quantize_graph(g, fsq_cfg, z_low)?
    } else {
        z_low
    };
    let up = g.matmul(mid, b.id("fsq.up.w")?)?;
    g.add_bias(up, b.id("fsq.up.b")?)
}

#[derive(Clone, Debug)]
pub enum TranscriptSource {
    /// Built-in greedy CTC decode.
    Ctc,
    /// External transcript; anchors computed by proportional spacing when
    /// absent (the EXT / external-ASR analog).
    Ext {
        transcript: Vec<usize>,
        anchors: Option<Vec<usize>>,
    },
}

/// Monotonic proportional anchor spacing over [0, T).
pub fn proportional_anchors(n: usize, t: usize) -> Result<Vec<usize>> {
    if n > t {
        return Err(Error::Contract(format!(
            "cannot anchor {n} tokens in {t} frames"
        )));
    }
    Ok((0..n).map(|i| i * t / n).collect())
}

#[derive(Clone, Debug)]
pub struct Encoded {
    pub transcript: Vec<usize>,
    pub anchors: Vec<usize>,
    /// Up-projected aligned latents Ẑ, [n, d_z].
    pub zhat: Vec<f32>,
    /// FSQ indices; None in bypass mode.
    pub q: Option<Vec<usize>>,
    /// Aggregator attention map, [n, T].
    pub attn: Vec<f32>,
    pub num_frames: usize,
}

/// Offline encode: full graph forward, greedy decode (or external
/// transcript), aggregation, FSQ.
pub fn encode_offline(
    params: &ParamSet,
    cfg: &EncoderConfig,
    fsq_cfg: &FsqConfig,
    frames: &[f32],
    t: usize,
    source: &TranscriptSource,
    quantize: bool,
) -> Result<Encoded> {
    let mut g = Graph::new();
    let b = Binder::bind(&mut g, params, |_| false)?;
    let fid = g.leaf(&[t, cfg.feature_dim], frames.to_vec(), false)?;
    let hiddens = asr_encode_graph(&mut g, &b, cfg, fid)?;
    let h_shallow = hiddens[cfg.shallow_layer - 1];
    let h_last = *hiddens.last().unwrap();
    let logp = ctc_head_graph(&mut g, &b, h_last)?;

    let (transcript, anchors) = match source {
        TranscriptSource::Ctc => {
            let ems = greedy_decode(g.data(logp), t, cfg.vocab + 1);
            (
                ems.iter().map(|e| e.symbol).collect::<Vec<_>>(),
                ems.iter().map(|e| e.anchor).collect::<Vec<_>>(),
            )
        }
        TranscriptSource::Ext { transcript, anchors } => {
            let a = match anchors {
                Some(a) => a.clone(),
                None => proportional_anchors(transcript.len(), t)?,
            };
            (transcript.clone(), a)
        }
    };

    let (z, attn) = aggregate_graph(&mut g, &b, cfg, &transcript, &anchors, h_shallow, h_last)?;
    let zhat = fsq_pipeline_graph(&mut g, &b, fsq_cfg, z, quantize)?;
    let q = if quantize {
        // grid values live right before the up-projection: recompute per row
        let down = g.matmul(z, b.id("fsq.down.w")?)?;
        let z_low = g.add_bias(down, b.id("fsq.down.b")?)?;
        let mut idx = Vec::with_capacity(transcript.len());
        for i in 0..transcript.len() {
            let row = &g.data(z_low)[i * fsq_cfg.k()..(i + 1) * fsq_cfg.k()];
            idx.push(fsq::fsq_quantize_row(fsq_cfg, row)?.1);
        }
        Some(idx)
    } else {
        None
    };
    Ok(Encoded {
        transcript,
        anchors,
        zhat: g.data(zhat).to_vec(),
        q,
        attn: g.data(attn).to_vec(),
        num_frames: t,
    })
}

/// One finalized aligned token emitted by the streaming encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenEvent {
    pub token: usize,
    /// Logical (stream-global) anchor frame.
    pub anchor: usize,
    pub zhat: Vec<f32>,
    pub q: Option<usize>,
}

/// Incremental encoder: append-only per-layer KV caches plus the aggregator
/// key/value rows for the current window. Window resets clear the caches but
/// keep the CTC decoder state (pending run carries over).
pub struct EncoderState {
    caches: Vec<BlockCache>,
    agg_k: Vec<f32>,
    agg_v: Vec<f32>,
    decoder: StreamingDecoder,
    /// Logical frame index of the current window's first frame.
    window_base: usize,
    quantize: bool,
}

impl EncoderState {
    pub fn new(cfg: &EncoderConfig, quantize: bool) -> Self {
        Self {
            caches: vec![BlockCache::default(); cfg.num_layers],
            agg_k: Vec::new(),
            agg_v: Vec::new(),
            decoder: StreamingDecoder::new(cfg.vocab + 1),
            window_base: 0,
            quantize,
        }
    }

    pub fn frames_seen(&self) -> usize {
        self.decoder.frames_seen()
    }

    /// Hard window reset: attention caches cleared, CTC pending run kept.
    pub fn reset_window(&mut self) {
        for c in &mut self.caches {
            c.clear();
        }
        self.agg_k.clear();
        self.agg_v.clear();
        self.window_base = self.decoder.frames_seen();
    }

    /// Feed one frame; returns the token finalized by this frame, if any.
    pub fn push_frame(
        &mut self,
        params: &ParamSet,
        cfg: &EncoderConfig,
        fsq_cfg: &FsqConfig,
        frame: &[f32],
    ) -> Result<Option<TokenEvent>> {
        if frame.len() != cfg.feature_dim {
            return Err(Error::Shape {
                op: "push_frame",
                left: format!("[{}]", frame.len()),
                right: format!("[{}]", cfg.feature_dim),
            });
        }
        let rel = self.decoder.frames_seen() - self.window_base;
        let w_in = params.get("enc.in_proj.w")?;
        let b_in = &params.get("enc.in_proj.b")?.data;
        let mut x = kernels::matvec(frame, &w_in.data, cfg.feature_dim, cfg.d_model);
        kernels::add_assign(&mut x, b_in);
        kernels::add_assign(&mut x, &kernels::periodic_posenc(rel, cfg.d_model));

        let mut h_shallow = Vec::new();
        for i in 0..cfg.num_layers {
            x = crate::model::transformer_block_step(
                params,
                &format!("enc.block{i}"),
                &mut self.caches[i],
                &x,
                cfg.num_heads,
            )?;
            if i + 1 == cfg.shallow_layer {
                h_shallow = x.clone();
            }
        }
        let h_last = x;

        // aggregator key/value rows for this frame
        let mut hv = Vec::with_capacity(2 * cfg.d_model);
        hv.extend_from_slice(&h_shallow);
        hv.extend_from_slice(&h_last);
        let wk = params.get("agg.wk")?;
        let wv = params.get("agg.wv")?;
        self.agg_k
            .extend(kernels::matvec(&hv, &wk.data, 2 * cfg.d_model, cfg.d_model));
        self.agg_v
            .extend(kernels::matvec(&hv, &wv.data, 2 * cfg.d_model, cfg.d_model));

        // CTC row
        let wc = params.get("ctc.w")?;
        let bc = &params.get("ctc.b")?.data;
        let mut row = kernels::matvec(&h_last, &wc.data, cfg.d_model, cfg.vocab + 1);
        kernels::add_assign(&mut row, bc);
        kernels::log_softmax_row(&mut row);
        match self.decoder.push_row(&row) {
            Some(e) => Ok(Some(self.aggregate_token(params, cfg, fsq_cfg, e)?)),
            None => Ok(None),
        }
    }

    /// Finalize the pending CTC run at end of stream.
    pub fn flush(
        &mut self,
        params: &ParamSet,
        cfg: &EncoderConfig,
        fsq_cfg: &FsqConfig,
    ) -> Result<Option<TokenEvent>> {
        match self.decoder.flush() {
            Some(e) => Ok(Some(self.aggregate_token(params, cfg, fsq_cfg, e)?)),
            None => Ok(None),
        }
    }

    fn aggregate_token(
        &self,
        params: &ParamSet,
        cfg: &EncoderConfig,
        fsq_cfg: &FsqConfig,
        e: Emission,
    ) -> Result<TokenEvent> {
        // anchors from a previous window clamp to this window's first frame
        let rel = e.anchor.saturating_sub(self.window_base);
        let emb = params.get("agg.text_emb")?;
        let mut qin = emb.data[e.symbol * cfg.d_model..(e.symbol + 1) * cfg.d_model].to_vec();
        kernels::add_assign(&mut qin, &kernels::periodic_posenc(rel, cfg.d_model));
        let wq = params.get("agg.wq")?;
        let q = kernels::matvec(&qin, &wq.data, cfg.d_model, cfg.d_model);

        let avail = self.agg_k.len() / cfg.d_model;
        let upto = (rel + 1).min(avail);
        let scale = 1.0f32 / (cfg.d_model as f32).sqrt();
        let mut scores = vec![0.0f32; upto];
        for (j, s) in scores.iter_mut().enumerate() {
            let kj = &self.agg_k[j * cfg.d_model..(j + 1) * cfg.d_model];
            let mut acc = 0.0f32;
            for i in 0..cfg.d_model {
                acc += q[i] * kj[i];
            }
            *s = acc * scale;
        }
        kernels::softmax_row(&mut scores);
        let mut pooled = vec![0.0f32; cfg.d_model];
        for i in 0..cfg.d_model {
            let mut acc = 0.0f32;
            for (j, &sc) in scores.iter().enumerate() {
                acc += sc * self.agg_v[j * cfg.d_model + i];
            }
            pooled[i] = acc;
        }
        kernels::add_assign(&mut pooled, &q);
        let wo = params.get("agg.wo")?;
        let bo = &params.get("agg.bo")?.data;
        let mut z = kernels::matvec(&pooled, &wo.data, cfg.d_model, cfg.aligned_dim);
        kernels::add_assign(&mut z, bo);

        let dw = params.get("fsq.down.w")?;
        let db = &params.get("fsq.down.b")?.data;
        let mut z_low = kernels::matvec(&z, &dw.data, cfg.aligned_dim, fsq_cfg.k());
        kernels::add_assign(&mut z_low, db);
        let (mid, q_idx) = if self.quantize {
            let (grid, qi) = fsq::fsq_quantize_row(fsq_cfg, &z_low)?;
            (grid, Some(qi))
        } else {
            (z_low, None)
        };
        let uw = params.get("fsq.up.w")?;
        let ub = &params.get("fsq.up.b")?.data;
        let mut zhat = kernels::matvec(&mid, &uw.data, fsq_cfg.k(), cfg.aligned_dim);
        kernels::add_assign(&mut zhat, ub);

        Ok(TokenEvent {
            token: e.symbol,
            anchor: e.anchor,
            zhat,
            q: q_idx,
        })
    }
}

/// Attention-map text dump: rows=tokens, cols=frames, space-separated.
pub fn attn_map_text(attn: &[f32], n: usize, t: usize) -> String {
    let mut out = String::new();
    for i in 0..n {
        let row: Vec<String> = (0..t).map(|j| format!("{:.6}", attn[i * t + j])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (EncoderConfig, FsqConfig, ParamSet) {
        let cfg = EncoderConfig::default();
        let fsq_cfg = FsqConfig::default();
        let mut params = ParamSet::default();
        let mut init = ParamInit::new(&mut params, 42);
        init_params(&mut init, &cfg, &fsq_cfg);
        (cfg, fsq_cfg, params)
    }

    fn rand_frames(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Vec<f32> {
        (0..t * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
    }

    #[test]
    fn causality_row_zero_stable_under_extension() {
        let (cfg, _, params) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frames = rand_frames(&mut rng, 6, cfg.feature_dim);
        let run = |fr: &[f32], t: usize| {
            let mut g = Graph::new();
            let b = Binder::bind(&mut g, &params, |_| false).unwrap();
            let fid = g.leaf(&[t, cfg.feature_dim], fr.to_vec(), false).unwrap();
            let hs = asr_encode_graph(&mut g, &b, &cfg, fid).unwrap();
            hs.iter().map(|&h| g.data(h).to_vec()).collect::<Vec<_>>()
        };
        let full = run(&frames, 6);
        let one = run(&frames[..cfg.feature_dim], 1);
        for (hf, h1) in full.iter().zip(&one) {
            assert!(hf[..cfg.d_model]
                .iter()
                .zip(&h1[..cfg.d_model])
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn zero_block_weights_reduce_to_input_projection() {
        let (cfg, fsq_cfg, mut params) = toy();
        let _ = fsq_cfg;
        for (name, p) in params.params.iter_mut() {
            if name.contains(".attn.") || name.contains(".mlp.w") {
                p.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frames = rand_frames(&mut rng, 4, cfg.feature_dim);
        let mut g = Graph::new();
        let b = Binder::bind(&mut g, &params, |_| false).unwrap();
        let fid = g.leaf(&[4, cfg.feature_dim], frames.clone(), false).unwrap();
        let hs = asr_encode_graph(&mut g, &b, &cfg, fid).unwrap();
        let proj = g.matmul(fid, b.id("enc.in_proj.w").unwrap()).unwrap();
        let projb = g.add_bias(proj, b.id("enc.in_proj.b").unwrap()).unwrap();
        let expect = g.add_const(projb, &posenc_rows(0, 4, cfg.d_model)).unwrap();
        assert_eq!(g.data(*hs.last().unwrap()), g.data(expect));
    }

    #[test]
    fn zero_ctc_head_gives_uniform_logprobs() {
        let (cfg, _, mut params) = toy();
        params.get_mut("ctc.w").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frames = rand_frames(&mut rng, 3, cfg.feature_dim);
        let mut g = Graph::new();
        let b = Binder::bind(&mut g, &params, |_| false).unwrap();
        let fid = g.leaf(&[3, cfg.feature_dim], frames, false).unwrap();
        let hs = asr_encode_graph(&mut g, &b, &cfg, fid).unwrap();
        let logp = ctc_head_graph(&mut g, &b, *hs.last().unwrap()).unwrap();
        let want = -((cfg.vocab + 1) as f32).ln();
        for &v in g.data(logp) {
            assert!((v - want).abs() < 1e-6);
        }
        // rows log-sum-exp to 0
        for row in g.data(logp).chunks(cfg.vocab + 1) {
            assert!(kernels::logsumexp_row(row).abs() < 1e-5);
        }
    }

    #[test]
    fn aggregator_is_anchor_causal() {
        let (cfg, _, params) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = 8;
        let mut frames = rand_frames(&mut rng, t, cfg.feature_dim);
        let run = |fr: &[f32]| {
            let mut g = Graph::new();
            let b = Binder::bind(&mut g, &params, |_| false).unwrap();
            let fid = g.leaf(&[t, cfg.feature_dim], fr.to_vec(), false).unwrap();
            let hs = asr_encode_graph(&mut g, &b, &cfg, fid).unwrap();
            let (z, attn) = aggregate_graph(
                &mut g,
                &b,
                &cfg,
                &[1, 3],
                &[2, 5],
                hs[cfg.shallow_layer - 1],
                *hs.last().unwrap(),
            )
            .unwrap();
            (g.data(z).to_vec(), g.data(attn).to_vec())
        };
        let (z0, attn0) = run(&frames);
        // attention rows sum to 1
        for row in attn0.chunks(t) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        // perturb frames after the last anchor (5): both rows bit-identical
        for v in frames[6 * cfg.feature_dim..].iter_mut() {
            *v += 5.0;
        }
        let (z1, _) = run(&frames);
        assert!(z0.iter().zip(&z1).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn empty_decode_gives_empty_latents() {
        let (cfg, fsq_cfg, params) = toy();
        let mut g = Graph::new();
        let b = Binder::bind(&mut g, &params, |_| false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frames = rand_frames(&mut rng, 3, cfg.feature_dim);
        let fid = g.leaf(&[3, cfg.feature_dim], frames.clone(), false).unwrap();
        let hs = asr_encode_graph(&mut g, &b, &cfg, fid).unwrap();
        let (z, _) = aggregate_graph(
            &mut g,
            &b,
            &cfg,
            &[],
            &[],
            hs[cfg.shallow_layer - 1],
            *hs.last().unwrap(),
        )
        .unwrap();
        assert_eq!(g.shape(z), &[0, cfg.aligned_dim]);
        // encode_offline with EXT empty transcript also succeeds
        let enc = encode_offline(
            &params,
            &cfg,
            &fsq_cfg,
            &frames,
            3,
            &TranscriptSource::Ext {
                transcript: vec![],
                anchors: Some(vec![]),
            },
            true,
        )
        .unwrap();
        assert!(enc.transcript.is_empty());
        assert!(enc.zhat.is_empty());
    }

    #[test]
    fn streamed_encode_matches_offline_bit_exactly() {
        let (cfg, fsq_cfg, params) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for case in 0..20 {
            let t = rng.gen_range(3..30);
            let frames = rand_frames(&mut rng, t, cfg.feature_dim);
            let offline =
                encode_offline(&params, &cfg, &fsq_cfg, &frames, t, &TranscriptSource::Ctc, true)
                    .unwrap();
            let mut st = EncoderState::new(&cfg, true);
            let mut events = Vec::new();
            for row in frames.chunks(cfg.feature_dim) {
                if let Some(e) = st.push_frame(&params, &cfg, &fsq_cfg, row).unwrap() {
                    events.push(e);
                }
            }
            if let Some(e) = st.flush(&params, &cfg, &fsq_cfg).unwrap() {
                events.push(e);
            }
            assert_eq!(
                events.iter().map(|e| e.token).collect::<Vec<_>>(),
                offline.transcript,
                "case {case}"
            );
            assert_eq!(
                events.iter().map(|e| e.anchor).collect::<Vec<_>>(),
                offline.anchors
            );
            for (i, e) in events.iter().enumerate() {
                let want = &offline.zhat[i * cfg.aligned_dim..(i + 1) * cfg.aligned_dim];
                assert!(
                    e.zhat.iter().zip(want).all(|(a, b)| a.to_bits() == b.to_bits()),
                    "case {case} token {i} zhat diverged"
                );
                assert_eq!(e.q, offline.q.as_ref().map(|q| q[i]));
            }
        }
    }

    #[test]
    fn ext_override_matches_ctc_when_equal() {
        let (cfg, fsq_cfg, params) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = 12;
        let frames = rand_frames(&mut rng, t, cfg.feature_dim);
        let a = encode_offline(&params, &cfg, &fsq_cfg, &frames, t, &TranscriptSource::Ctc, true).unwrap();
        let b = encode_offline(
            &params,
            &cfg,
            &fsq_cfg,
            &frames,
            t,
            &TranscriptSource::Ext {
                transcript: a.transcript.clone(),
                anchors: Some(a.anchors.clone()),
            },
            true,
        )
        .unwrap();
        assert_eq!(a.zhat, b.zhat);
        assert_eq!(a.q, b.q);
    }

    #[test]
    fn proportional_anchors_strictly_increase() {
        let a = proportional_anchors(4, 12).unwrap();
        assert_eq!(a, vec![0, 3, 6, 9]);
        for w in a.windows(2) {
            assert!(w[0] < w[1]);
        }
        assert!(proportional_anchors(5, 3).is_err());
        assert!(proportional_anchors(0, 3).unwrap().is_empty());
    }

    #[test]
    fn gradcheck_encoder_stack() {
        // narrow stack: keeps f32 forward noise below the FD signal
        let cfg = EncoderConfig {
            d_model: 8,
            feature_dim: 6,
            vocab: 3,
            ..EncoderConfig::default()
        };
        let fsq_cfg = FsqConfig::default();
        let mut params = ParamSet::default();
        let mut init = ParamInit::new(&mut params, 42);
        init_params(&mut init, &cfg, &fsq_cfg);
        let t = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let frames = rand_frames(&mut rng, t, cfg.feature_dim);
        let rel = crate::autodiff::finite_diff_check(
            &|g: &mut Graph, leaf| {
                let b = Binder::bind(g, &params, |_| false)?;
                let hs = asr_encode_graph(g, &b, &cfg, leaf)?;
                let logits = g.matmul(*hs.last().unwrap(), b.id("ctc.w")?)?;
                let biased = g.add_bias(logits, b.id("ctc.b")?)?;
                g.ce_loss(biased, &[(0, 1), (1, 3), (2, 0), (3, 2)])
            },
            &[t, cfg.feature_dim],
            &frames,
            1e-2,
        )
        .unwrap();
        assert!(rel < 1e-3, "max rel err {rel}");
    }
}
