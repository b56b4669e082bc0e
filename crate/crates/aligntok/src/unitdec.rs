//! Autoregressive unit decoder over the N:M interleaved slot sequence:
//! BOS, then repeating [N aligned slots | M unit slots], EOS in a unit slot.
//! Training runs the graph forward; generation advances a cached state one
//! slot at a time with the same kernels, so streamed and offline greedy
//! outputs are identical.

use crate::autodiff::{Graph, TensorId};
use crate::error::{Error, Result};
use crate::kernels;
use crate::model::{transformer_block, transformer_block_step, Binder, BlockCache, ParamInit, ParamSet};
use std::collections::VecDeque;

#[derive(Clone, Copy, Debug)]
pub struct InterleaveConfig {
    pub n: usize,
    pub m: usize,
}

impl Default for InterleaveConfig {
    fn default() -> Self {
        Self { n: 2, m: 5 }
    }
}

impl InterleaveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 || self.m < 1 {
            return Err(Error::Config(format!("N:M must be >= 1:1, got {}:{}", self.n, self.m)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Bos,
    /// Text token plus the index of its aligned-latent row.
    Aligned { token: usize, z_row: usize },
    TextDone,
    Unit(usize),
    Eos,
}

/// Deterministic N:M interleave of a transcript (with one latent row per
/// token) and a unit sequence.
pub fn interleave(s_hat: &[usize], n_latents: usize, y: &[usize], cfg: &InterleaveConfig) -> Result<Vec<Slot>> {
    cfg.validate()?;
    if s_hat.len() != n_latents {
        return Err(Error::Contract(format!(
            "{} tokens vs {} latent rows",
            s_hat.len(),
            n_latents
        )));
    }
    let mut slots = vec![Slot::Bos];
    let mut ti = 0usize;
    let mut ui = 0usize;
    while ti < s_hat.len() || ui < y.len() {
        for _ in 0..cfg.n {
            if ti < s_hat.len() {
                slots.push(Slot::Aligned { token: s_hat[ti], z_row: ti });
                ti += 1;
            } else {
                slots.push(Slot::TextDone);
            }
        }
        for _ in 0..cfg.m {
            if ui < y.len() {
                slots.push(Slot::Unit(y[ui]));
                ui += 1;
            } else {
                break;
            }
        }
    }
    slots.push(Slot::Eos);
    Ok(slots)
}

/// Inverse of [`interleave`]: recover (transcript, units).
pub fn parse(slots: &[Slot]) -> Result<(Vec<usize>, Vec<usize>)> {
    if slots.first() != Some(&Slot::Bos) || slots.last() != Some(&Slot::Eos) {
        return Err(Error::Contract("slot sequence must be BOS ... EOS".into()));
    }
    let mut s = Vec::new();
    let mut y = Vec::new();
    for slot in &slots[1..slots.len() - 1] {
        match slot {
            Slot::Aligned { token, .. } => s.push(*token),
            Slot::Unit(u) => y.push(*u),
            Slot::TextDone => {}
            Slot::Bos | Slot::Eos => {
                return Err(Error::Contract("BOS/EOS inside the slot body".into()))
            }
        }
    }
    Ok((s, y))
}

#[derive(Clone, Debug)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    /// Unit vocabulary U (silence included); EOS is class U in the head.
    pub unit_vocab: usize,
    pub text_vocab: usize,
    pub d_z: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            d_model: 64,
            num_heads: 2,
            unit_vocab: 17,
            text_vocab: 8,
            d_z: 16,
        }
    }
}

impl DecoderConfig {
    pub fn eos_class(&self) -> usize {
        self.unit_vocab
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.num_heads
            )));
        }
        Ok(())
    }
}

pub fn init_params(init: &mut ParamInit, cfg: &DecoderConfig) {
    init.embedding("dec.text_emb", cfg.text_vocab, cfg.d_model);
    init.embedding("dec.unit_emb", cfg.unit_vocab, cfg.d_model);
    init.embedding("dec.ctrl_emb", 2, cfg.d_model); // row 0 BOS, row 1 TEXT_DONE
    init.matrix("dec.z_proj.w", cfg.d_z, cfg.d_model);
    init.zeros("dec.z_proj.b", cfg.d_model);
    for i in 0..cfg.num_layers {
        init.block(&format!("dec.block{i}"), cfg.d_model);
    }
    init.matrix("dec.head.w", cfg.d_model, cfg.unit_vocab + 1);
    init.zeros("dec.head.b", cfg.unit_vocab + 1);
}

/// Unit-counter positional phase per slot: the number of UNIT slots strictly
/// before it. Lets the decoder track elapsed frames against anchor phases.
fn slot_phases(slots: &[Slot]) -> Vec<usize> {
    let mut phases = Vec::with_capacity(slots.len());
    let mut units = 0usize;
    for s in slots {
        phases.push(units);
        if matches!(s, Slot::Unit(_)) {
            units += 1;
        }
    }
    phases
}

/// Graph forward over an interleaved sequence. Returns per-slot logits over
/// U+1 classes and the (position, target) pairs that carry loss: exactly the
/// positions whose NEXT slot is a unit or EOS.
pub fn decoder_forward(
    g: &mut Graph,
    b: &Binder,
    cfg: &DecoderConfig,
    slots: &[Slot],
    zhat: TensorId,
) -> Result<(TensorId, Vec<(usize, usize)>)> {
    cfg.validate()?;
    if slots.len() < 2 {
        return Err(Error::Contract("slot sequence too short".into()));
    }
    let zp = g.matmul(zhat, b.id("dec.z_proj.w")?)?;
    let zproj = g.add_bias(zp, b.id("dec.z_proj.b")?)?;
    let n_latents = g.shape(zproj)[0];

    // the final EOS is a prediction target only, never an input
    let mut rows = Vec::with_capacity(slots.len() - 1);
    for slot in &slots[..slots.len() - 1] {
        let row = match slot {
            Slot::Bos => g.embedding(b.id("dec.ctrl_emb")?, &[0])?,
            Slot::TextDone => g.embedding(b.id("dec.ctrl_emb")?, &[1])?,
            Slot::Unit(u) => g.embedding(b.id("dec.unit_emb")?, &[*u])?,
            Slot::Aligned { token, z_row } => {
                if *z_row >= n_latents {
                    return Err(Error::Contract(format!(
                        "aligned slot references latent row {z_row} of {n_latents}"
                    )));
                }
                let e = g.embedding(b.id("dec.text_emb")?, &[*token])?;
                let zr = g.slice_rows(zproj, *z_row, 1)?;
                g.add(e, zr)?
            }
            Slot::Eos => {
                return Err(Error::Contract("EOS inside the slot body".into()))
            }
        };
        rows.push(row);
    }
    let mut x = g.concat_rows(&rows)?;
    let phases = slot_phases(slots);
    let mut pe = Vec::with_capacity((slots.len() - 1) * cfg.d_model);
    for &p in &phases[..slots.len() - 1] {
        pe.extend(kernels::periodic_posenc(p, cfg.d_model));
    }
    x = g.add_const(x, &pe)?;
    for i in 0..cfg.num_layers {
        x = transformer_block(g, b, &format!("dec.block{i}"), x, cfg.num_heads)?;
    }
    let logits = g.matmul(x, b.id("dec.head.w")?)?;
    let logits = g.add_bias(logits, b.id("dec.head.b")?)?;

    let mut targets = Vec::new();
    for (pos, next) in slots[1..].iter().enumerate() {
        match next {
            Slot::Unit(u) => targets.push((pos, *u)),
            Slot::Eos => targets.push((pos, cfg.eos_class())),
            _ => {}
        }
    }
    Ok((logits, targets))
}

/// Mean CE over unit+EOS positions of an interleaved sequence.
pub fn unit_ce_loss(
    g: &mut Graph,
    b: &Binder,
    cfg: &DecoderConfig,
    slots: &[Slot],
    zhat: TensorId,
) -> Result<TensorId> {
    let (logits, targets) = decoder_forward(g, b, cfg, slots, zhat)?;
    g.ce_loss(logits, &targets)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenOutput {
    pub units: Vec<usize>,
    pub truncated: bool,
}

enum Phase {
    Aligned { filled: usize },
    Units { emitted: usize },
}

/// Incremental greedy generation state. Aligned tokens arrive via
/// [`GenState::push_token`]; each completed N-group triggers up to M unit
/// predictions. `finish_text` switches remaining aligned slots to TEXT_DONE
/// and runs until EOS or the slot cap.
pub struct GenState {
    cfg: DecoderConfig,
    inter: InterleaveConfig,
    caches: Vec<BlockCache>,
    queue: VecDeque<(usize, Vec<f32>)>,
    phase: Phase,
    units: Vec<usize>,
    unit_count: usize,
    slots_fed: usize,
    tokens_seen: usize,
    tokens_consumed: usize,
    u_max: usize,
    text_done: bool,
    done: bool,
    truncated: bool,
    last_logits: Option<Vec<f32>>,
    trace: Vec<Slot>,
}

impl GenState {
    pub fn new(cfg: &DecoderConfig, inter: &InterleaveConfig, u_max: usize) -> Self {
        Self {
            cfg: cfg.clone(),
            inter: *inter,
            caches: vec![BlockCache::default(); cfg.num_layers],
            queue: VecDeque::new(),
            phase: Phase::Aligned { filled: 0 },
            units: Vec::new(),
            unit_count: 0,
            slots_fed: 0,
            tokens_seen: 0,
            tokens_consumed: 0,
            u_max,
            text_done: false,
            done: false,
            truncated: false,
            last_logits: None,
            trace: Vec::new(),
        }
    }

    /// Exact sequence of input slots fed so far (no trailing EOS).
    pub fn trace(&self) -> &[Slot] {
        &self.trace
    }

    pub fn done(&self) -> bool {
        self.done
    }

    pub fn truncated(&self) -> bool {
        self.truncated
    }

    pub fn units(&self) -> &[usize] {
        &self.units
    }

    fn slot_cap(&self) -> usize {
        1 + self.inter.n + self.inter.m + 12 * self.u_max * self.tokens_seen
    }

    fn feed_slot(&mut self, params: &ParamSet, mut row: Vec<f32>) -> Result<()> {
        kernels::add_assign(&mut row, &kernels::periodic_posenc(self.unit_count, self.cfg.d_model));
        let mut x = row;
        for i in 0..self.cfg.num_layers {
            x = transformer_block_step(
                params,
                &format!("dec.block{i}"),
                &mut self.caches[i],
                &x,
                self.cfg.num_heads,
            )?;
        }
        let hw = params.get("dec.head.w")?;
        let hb = &params.get("dec.head.b")?.data;
        let mut logits = kernels::matvec(&x, &hw.data, self.cfg.d_model, self.cfg.unit_vocab + 1);
        kernels::add_assign(&mut logits, hb);
        self.last_logits = Some(logits);
        self.slots_fed += 1;
        Ok(())
    }

    fn embed_ctrl(&self, params: &ParamSet, idx: usize) -> Result<Vec<f32>> {
        let t = params.get("dec.ctrl_emb")?;
        Ok(t.data[idx * self.cfg.d_model..(idx + 1) * self.cfg.d_model].to_vec())
    }

    fn advance(&mut self, params: &ParamSet) -> Result<Vec<usize>> {
        let mut emitted = Vec::new();
        loop {
            if self.done {
                break;
            }
            if self.slots_fed >= self.slot_cap() {
                self.done = true;
                self.truncated = true;
                break;
            }
            match self.phase {
                Phase::Aligned { filled } => {
                    if filled == self.inter.n {
                        self.phase = Phase::Units { emitted: 0 };
                        continue;
                    }
                    if self.slots_fed == 0 {
                        let row = self.embed_ctrl(params, 0)?; // BOS
                        self.feed_slot(params, row)?;
                        self.trace.push(Slot::Bos);
                        continue;
                    }
                    if let Some((token, zrow)) = self.queue.pop_front() {
                        let emb = params.get("dec.text_emb")?;
                        let mut row =
                            emb.data[token * self.cfg.d_model..(token + 1) * self.cfg.d_model].to_vec();
                        let zw = params.get("dec.z_proj.w")?;
                        let zb = &params.get("dec.z_proj.b")?.data;
                        let mut zp = kernels::matvec(&zrow, &zw.data, self.cfg.d_z, self.cfg.d_model);
                        kernels::add_assign(&mut zp, zb);
                        kernels::add_assign(&mut row, &zp);
                        self.feed_slot(params, row)?;
                        self.trace.push(Slot::Aligned {
                            token,
                            z_row: self.tokens_consumed,
                        });
                        self.tokens_consumed += 1;
                        self.phase = Phase::Aligned { filled: filled + 1 };
                    } else if self.text_done {
                        let row = self.embed_ctrl(params, 1)?; // TEXT_DONE
                        self.feed_slot(params, row)?;
                        self.trace.push(Slot::TextDone);
                        self.phase = Phase::Aligned { filled: filled + 1 };
                    } else {
                        break; // wait for more tokens
                    }
                }
                Phase::Units { emitted: m_done } => {
                    if m_done == self.inter.m {
                        // A group ending exactly at the M boundary with nothing
                        // left to align is where training places the EOS target;
                        // consult the model here before scheduling another group.
                        if self.text_done && self.queue.is_empty() {
                            if let Some(logits) = &self.last_logits {
                                let mut best = 0usize;
                                let mut best_v = logits[0];
                                for (k, &v) in logits.iter().enumerate().skip(1) {
                                    if v > best_v {
                                        best_v = v;
                                        best = k;
                                    }
                                }
                                if best == self.cfg.eos_class() {
                                    self.done = true;
                                    break;
                                }
                            }
                        }
                        self.phase = Phase::Aligned { filled: 0 };
                        continue;
                    }
                    let logits = self
                        .last_logits
                        .as_ref()
                        .ok_or_else(|| Error::Contract("unit prediction before any slot".into()))?;
                    let mut best = 0usize;
                    let mut best_v = logits[0];
                    for (k, &v) in logits.iter().enumerate().skip(1) {
                        if v > best_v {
                            best_v = v;
                            best = k;
                        }
                    }
                    if best == self.cfg.eos_class() {
                        self.done = true;
                        break;
                    }
                    let emb = params.get("dec.unit_emb")?;
                    let row = emb.data[best * self.cfg.d_model..(best + 1) * self.cfg.d_model].to_vec();
                    self.feed_slot(params, row)?;
                    self.trace.push(Slot::Unit(best));
                    self.unit_count += 1;
                    self.units.push(best);
                    emitted.push(best);
                    self.phase = Phase::Units { emitted: m_done + 1 };
                }
            }
        }
        Ok(emitted)
    }

    /// Feed one aligned token (with its d_z latent row); returns any units
    /// finalized by the groups this completes.
    pub fn push_token(&mut self, params: &ParamSet, token: usize, zhat_row: &[f32]) -> Result<Vec<usize>> {
        if self.text_done {
            return Err(Error::Contract("push_token after finish_text".into()));
        }
        if zhat_row.len() != self.cfg.d_z {
            return Err(Error::Shape {
                op: "push_token",
                left: format!("[{}]", zhat_row.len()),
                right: format!("[{}]", self.cfg.d_z),
            });
        }
        if token >= self.cfg.text_vocab {
            return Err(Error::Contract(format!("text token {token} out of vocab")));
        }
        self.queue.push_back((token, zhat_row.to_vec()));
        self.tokens_seen += 1;
        self.advance(params)
    }

    /// No more text: run the schedule to EOS (or cap).
    pub fn finish_text(&mut self, params: &ParamSet) -> Result<Vec<usize>> {
        self.text_done = true;
        self.advance(params)
    }
}

/// Offline greedy generation: feed every token, then finish.
pub fn generate_offline(
    params: &ParamSet,
    cfg: &DecoderConfig,
    inter: &InterleaveConfig,
    s_hat: &[usize],
    zhat: &[f32],
    u_max: usize,
) -> Result<GenOutput> {
    let mut st = GenState::new(cfg, inter, u_max);
    for (i, &tok) in s_hat.iter().enumerate() {
        st.push_token(params, tok, &zhat[i * cfg.d_z..(i + 1) * cfg.d_z])?;
    }
    st.finish_text(params)?;
    Ok(GenOutput {
        units: st.units.clone(),
        truncated: st.truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (DecoderConfig, ParamSet) {
        let cfg = DecoderConfig::default();
        let mut params = ParamSet::default();
        let mut init = ParamInit::new(&mut params, 77);
        init_params(&mut init, &cfg);
        (cfg, params)
    }

    #[test]
    fn fig2_pattern_one_to_three() {
        // [PAPER: Fig. 2] 1:3, 4 tokens, 12 units:
        // BOS t1 u1 u2 u3 t2 u4 u5 u6 t3 u7 u8 u9 t4 u10 u11 u12 EOS
        let cfg = InterleaveConfig { n: 1, m: 3 };
        let s = vec![0, 1, 2, 3];
        let y: Vec<usize> = (0..12).collect();
        let slots = interleave(&s, 4, &y, &cfg).unwrap();
        let mut want = vec![Slot::Bos];
        for g in 0..4 {
            want.push(Slot::Aligned { token: g, z_row: g });
            for u in 0..3 {
                want.push(Slot::Unit(3 * g + u));
            }
        }
        want.push(Slot::Eos);
        assert_eq!(slots, want);
    }

    #[test]
    fn empty_units_pads_text_done_to_group_boundary() {
        let cfg = InterleaveConfig { n: 2, m: 5 };
        let slots = interleave(&[4, 5, 6], 3, &[], &cfg).unwrap();
        assert_eq!(
            slots,
            vec![
                Slot::Bos,
                Slot::Aligned { token: 4, z_row: 0 },
                Slot::Aligned { token: 5, z_row: 1 },
                Slot::Aligned { token: 6, z_row: 2 },
                Slot::TextDone,
                Slot::Eos,
            ]
        );
        // fully empty
        assert_eq!(interleave(&[], 0, &[], &cfg).unwrap(), vec![Slot::Bos, Slot::Eos]);
    }

    #[test]
    fn interleave_parse_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let cfg = InterleaveConfig {
                n: rng.gen_range(1..4),
                m: rng.gen_range(1..7),
            };
            let sl = rng.gen_range(0..10);
            let s: Vec<usize> = (0..sl).map(|_| rng.gen_range(0..8)).collect();
            let yl = rng.gen_range(0..40);
            let y: Vec<usize> = (0..yl).map(|_| rng.gen_range(0..17)).collect();
            let slots = interleave(&s, sl, &y, &cfg).unwrap();
            let (s2, y2) = parse(&slots).unwrap();
            assert_eq!(s2, s);
            assert_eq!(y2, y);
        }
    }

    #[test]
    fn loss_positions_are_units_plus_eos() {
        let (cfg, params) = toy();
        let inter = InterleaveConfig::default();
        let s = vec![1, 2, 3];
        let y: Vec<usize> = (0..11).map(|i| i % cfg.unit_vocab).collect();
        let slots = interleave(&s, 3, &y, &inter).unwrap();
        let mut g = Graph::new();
        let b = Binder::bind(&mut g, &params, |_| false).unwrap();
        let zhat = g.leaf(&[3, cfg.d_z], vec![0.1; 3 * cfg.d_z], false).unwrap();
        let (_, targets) = decoder_forward(&mut g, &b, &cfg, &slots, zhat).unwrap();
        assert_eq!(targets.len(), y.len() + 1);
        assert_eq!(targets.last().unwrap().1, cfg.eos_class());
    }

    #[test]
    fn uniform_logits_ce_is_ln_18() {
        // zero head weights -> uniform over U+1 = 18 classes
        let (cfg, mut params) = toy();
        params.get_mut("dec.head.w").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        let inter = InterleaveConfig::default();
        let s = vec![0, 1];
        let y = vec![3, 4, 5];
        let slots = interleave(&s, 2, &y, &inter).unwrap();
        let mut g = Graph::new();
        let b = Binder::bind(&mut g, &params, |_| false).unwrap();
        let zhat = g.leaf(&[2, cfg.d_z], vec![0.2; 2 * cfg.d_z], false).unwrap();
        let loss = unit_ce_loss(&mut g, &b, &cfg, &slots, zhat).unwrap();
        let want = 18f32.ln(); // ~2.890372
        assert!((g.data(loss)[0] - want).abs() < 1e-5);
    }

    #[test]
    fn decoder_is_causal_in_slots() {
        let (cfg, params) = toy();
        let inter = InterleaveConfig { n: 1, m: 3 };
        let s = vec![1, 2];
        let mut y = vec![3, 4, 5, 6];
        let run = |y: &[usize]| {
            let slots = interleave(&s, 2, y, &inter).unwrap();
            let mut g = Graph::new();
            let b = Binder::bind(&mut g, &params, |_| false).unwrap();
            let zhat = g.leaf(&[2, cfg.d_z], vec![0.3; 2 * cfg.d_z], false).unwrap();
            let (logits, _) = decoder_forward(&mut g, &b, &cfg, &slots, zhat).unwrap();
            g.data(logits).to_vec()
        };
        let a = run(&y);
        y[3] = 9; // last unit differs; only positions >= its slot may change
        let bv = run(&y);
        let w = cfg.unit_vocab + 1;
        // slots: BOS t1 u3 u4 u5 [u6|u9] ... -> first 5 input slots identical
        assert!(a[..5 * w].iter().zip(&bv[..5 * w]).all(|(x, z)| x.to_bits() == z.to_bits()));
        assert!(a[5 * w..] != bv[5 * w..]);
    }

    #[test]
    fn gradcheck_decoder() {
        let cfg = DecoderConfig {
            d_model: 8,
            unit_vocab: 5,
            text_vocab: 3,
            d_z: 4,
            ..DecoderConfig::default()
        };
        let mut params = ParamSet::default();
        let mut init = ParamInit::new(&mut params, 11);
        init_params(&mut init, &cfg);
        let inter = InterleaveConfig { n: 1, m: 3 };
        let s = vec![0, 2];
        let y = vec![1, 3, 0, 4, 2];
        let slots = interleave(&s, 2, &y, &inter).unwrap();
        assert_eq!(slots.len(), 9); // BOS t u u u t u u EOS
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z: Vec<f32> = (0..2 * cfg.d_z).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let rel = crate::autodiff::finite_diff_check(
            &|g: &mut Graph, leaf| {
                let b = Binder::bind(g, &params, |_| false)?;
                unit_ce_loss(g, &b, &cfg, &slots, leaf)
            },
            &[2, cfg.d_z],
            &z,
            1e-2,
        )
        .unwrap();
        assert!(rel < 1e-3, "max rel err {rel}");
    }

    #[test]
    fn generation_streamed_equals_offline() {
        let (cfg, params) = toy();
        let inter = InterleaveConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for case in 0..30 {
            let sl = rng.gen_range(0..8);
            let s: Vec<usize> = (0..sl).map(|_| rng.gen_range(0..cfg.text_vocab)).collect();
            let z: Vec<f32> = (0..sl * cfg.d_z).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let offline = generate_offline(&params, &cfg, &inter, &s, &z, 6).unwrap();
            // streamed: one token at a time
            let mut st = GenState::new(&cfg, &inter, 6);
            let mut units = Vec::new();
            for (i, &tok) in s.iter().enumerate() {
                units.extend(st.push_token(&params, tok, &z[i * cfg.d_z..(i + 1) * cfg.d_z]).unwrap());
            }
            units.extend(st.finish_text(&params).unwrap());
            assert_eq!(units, offline.units, "case {case}");
            assert_eq!(st.truncated(), offline.truncated);
        }
    }

    #[test]
    fn first_units_appear_only_after_n_tokens() {
        let (cfg, params) = toy();
        let inter = InterleaveConfig::default(); // N=2
        let mut st = GenState::new(&cfg, &inter, 6);
        let z = vec![0.1f32; cfg.d_z];
        let out1 = st.push_token(&params, 0, &z).unwrap();
        assert!(out1.is_empty(), "units before N tokens");
        // second token completes the N-group; untrained weights emit up to M
        let _ = st.push_token(&params, 1, &z).unwrap();
        assert!(st.units().len() <= inter.m);
    }

    #[test]
    fn graph_forward_reproduces_greedy_choices() {
        // teacher-force the generated sequence through the training graph:
        // argmax at every loss position must equal the unit the generator
        // picked (same kernels, same inputs)
        let (cfg, params) = toy();
        let inter = InterleaveConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s: Vec<usize> = (0..5).map(|_| rng.gen_range(0..cfg.text_vocab)).collect();
        let z: Vec<f32> = (0..5 * cfg.d_z).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let mut st = GenState::new(&cfg, &inter, 6);
        for (i, &tok) in s.iter().enumerate() {
            st.push_token(&params, tok, &z[i * cfg.d_z..(i + 1) * cfg.d_z])
                .unwrap();
        }
        st.finish_text(&params).unwrap();
        if st.truncated() {
            return; // untrained truncation: no EOS decision to check
        }
        // replay exactly the slots the generator fed, terminated with EOS
        let mut slots = st.trace().to_vec();
        slots.push(Slot::Eos);
        let mut g = Graph::new();
        let b = Binder::bind(&mut g, &params, |_| false).unwrap();
        let zhat = g.leaf(&[5, cfg.d_z], z, false).unwrap();
        let (logits, targets) = decoder_forward(&mut g, &b, &cfg, &slots, zhat).unwrap();
        let w = cfg.unit_vocab + 1;
        for &(pos, class) in &targets {
            let row = &g.data(logits)[pos * w..(pos + 1) * w];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, class, "position {pos}");
        }
    }

    #[test]
    fn empty_transcript_caps_after_one_group() {
        let (cfg, params) = toy();
        let inter = InterleaveConfig::default();
        let out = generate_offline(&params, &cfg, &inter, &[], &[], 6).unwrap();
        // structurally: at most M units before the cap logic stops generation
        assert!(out.units.len() <= inter.m);
    }
}
