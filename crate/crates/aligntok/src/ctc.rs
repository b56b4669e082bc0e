//! CTC loss (forward-backward over the blank-extended label, f64 log space),
//! an exhaustive path-enumeration oracle, and greedy decoding with per-symbol
//! emission anchors. The blank symbol is the LAST class (index V).

use crate::autodiff::{Graph, TensorId};
use crate::error::{Error, Result};

const NEG_INF: f64 = f64::NEG_INFINITY;

fn lse2(a: f64, b: f64) -> f64 {
    if a == NEG_INF {
        return b;
    }
    if b == NEG_INF {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn extended_label(labels: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(blank);
    for &l in labels {
        ext.push(l);
        ext.push(blank);
    }
    ext
}

pub struct CtcLoss {
    pub loss: TensorId,
    /// False when no alignment of the label fits in T frames; the loss node
    /// is then +inf and contributes no gradient. Callers must exclude such
    /// samples from batch means.
    pub feasible: bool,
}

/// Negative log-likelihood of `labels` under per-frame log-probabilities
/// `logp` (shape [T, V+1], rows already log-softmaxed, blank = column V).
///
/// The alpha/beta recursions run in f64; the gradient w.r.t. `logp` is the
/// negative symbol posterior, precomputed here and attached as the backward
/// closure.
pub fn ctc_loss(g: &mut Graph, logp: TensorId, labels: &[usize]) -> Result<CtcLoss> {
    let shape = g.shape(logp).to_vec();
    if shape.len() != 2 {
        return Err(Error::Contract(format!(
            "ctc_loss expects [T, V+1] log-probs, got {shape:?}"
        )));
    }
    let (t_len, n_cls) = (shape[0], shape[1]);
    if n_cls < 2 {
        return Err(Error::Contract("ctc_loss needs at least one real symbol plus blank".into()));
    }
    let blank = n_cls - 1;
    for &l in labels {
        if l >= blank {
            return Err(Error::Contract(format!(
                "label {l} out of range (vocab {blank}, blank reserved)"
            )));
        }
    }
    if t_len == 0 {
        return Err(Error::Contract("ctc_loss on zero frames".into()));
    }

    let lp: Vec<f64> = g.data(logp).iter().map(|&v| v as f64).collect();
    let at = |t: usize, k: usize| lp[t * n_cls + k];

    let ext = extended_label(labels, blank);
    let s = ext.len();

    // alpha
    let mut alpha = vec![NEG_INF; t_len * s];
    alpha[0] = at(0, ext[0]);
    if s > 1 {
        alpha[1] = at(0, ext[1]);
    }
    for t in 1..t_len {
        for u in 0..s {
            let mut acc = alpha[(t - 1) * s + u];
            if u >= 1 {
                acc = lse2(acc, alpha[(t - 1) * s + u - 1]);
            }
            if u >= 2 && ext[u] != blank && ext[u] != ext[u - 2] {
                acc = lse2(acc, alpha[(t - 1) * s + u - 2]);
            }
            alpha[t * s + u] = if acc == NEG_INF { NEG_INF } else { acc + at(t, ext[u]) };
        }
    }
    let total = if s > 1 {
        lse2(alpha[(t_len - 1) * s + s - 1], alpha[(t_len - 1) * s + s - 2])
    } else {
        alpha[(t_len - 1) * s + s - 1]
    };

    if total == NEG_INF {
        // infeasible: no backward, flagged loss
        let loss = g.push(vec![1, 1], vec![f32::INFINITY], false, None);
        return Ok(CtcLoss { loss, feasible: false });
    }

    // beta (includes emission at t, mirroring alpha)
    let mut beta = vec![NEG_INF; t_len * s];
    beta[(t_len - 1) * s + s - 1] = at(t_len - 1, ext[s - 1]);
    if s > 1 {
        beta[(t_len - 1) * s + s - 2] = at(t_len - 1, ext[s - 2]);
    }
    for t in (0..t_len - 1).rev() {
        for u in 0..s {
            let mut acc = beta[(t + 1) * s + u];
            if u + 1 < s {
                acc = lse2(acc, beta[(t + 1) * s + u + 1]);
            }
            if u + 2 < s && ext[u + 2] != blank && ext[u] != ext[u + 2] {
                acc = lse2(acc, beta[(t + 1) * s + u + 2]);
            }
            beta[t * s + u] = if acc == NEG_INF { NEG_INF } else { acc + at(t, ext[u]) };
        }
    }

    // grad[t,k] = -gamma_t(k) = -exp(lse_{u: ext[u]=k}(alpha+beta) - lp(t,k) - total)
    let mut grad = vec![0.0f32; t_len * n_cls];
    for t in 0..t_len {
        let mut acc = vec![NEG_INF; n_cls];
        for u in 0..s {
            let ab = if alpha[t * s + u] == NEG_INF || beta[t * s + u] == NEG_INF {
                NEG_INF
            } else {
                alpha[t * s + u] + beta[t * s + u]
            };
            acc[ext[u]] = lse2(acc[ext[u]], ab);
        }
        for k in 0..n_cls {
            if acc[k] != NEG_INF {
                grad[t * n_cls + k] = -((acc[k] - at(t, k) - total).exp() as f32);
            }
        }
    }

    let req = g.requires_grad(logp);
    let bwd: Option<Box<dyn Fn(&mut Graph)>> = if req {
        let out_idx = g.next_id();
        Some(Box::new(move |g: &mut Graph| {
            let Some(go) = g.grad(out_idx).map(|x| x.to_vec()) else {
                return;
            };
            let scaled: Vec<f32> = grad.iter().map(|&v| v * go[0]).collect();
            g.accum_grad(logp, &scaled);
        }))
    } else {
        None
    };
    let loss = g.push(vec![1, 1], vec![(-total) as f32], req, bwd);
    Ok(CtcLoss { loss, feasible: true })
}

/// Exhaustive oracle: sums probability over every length-T path whose
/// collapse equals `labels`. Guarded to (V+1)^T <= 2^20 paths.
pub fn brute_force_ctc(logp: &[f32], t_len: usize, n_cls: usize, labels: &[usize]) -> Result<f64> {
    if n_cls == 0 || t_len == 0 {
        return Err(Error::Oracle("empty log-prob table".into()));
    }
    let total_paths = (n_cls as f64).powi(t_len as i32);
    if total_paths > (1u64 << 20) as f64 {
        return Err(Error::Oracle(format!(
            "brute force would enumerate {total_paths} paths (> 2^20)"
        )));
    }
    let blank = n_cls - 1;
    let mut path = vec![0usize; t_len];
    let mut acc = NEG_INF;
    loop {
        // collapse: drop repeats, then blanks
        let mut collapsed = Vec::new();
        let mut prev = usize::MAX;
        for &p in &path {
            if p != prev && p != blank {
                collapsed.push(p);
            }
            prev = p;
        }
        if collapsed == labels {
            let mut lp = 0.0f64;
            for (t, &p) in path.iter().enumerate() {
                lp += logp[t * n_cls + p] as f64;
            }
            acc = lse2(acc, lp);
        }
        // next path in base-n_cls counting
        let mut carry = true;
        for slot in path.iter_mut().rev() {
            *slot += 1;
            if *slot == n_cls {
                *slot = 0;
            } else {
                carry = false;
                break;
            }
        }
        if carry {
            break;
        }
    }
    if acc == NEG_INF {
        Ok(f64::INFINITY) // infeasible: -log p = +inf
    } else {
        Ok(-acc)
    }
}

/// One decoded symbol with its emission anchor: the first frame of the
/// argmax run that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Emission {
    pub symbol: usize,
    pub anchor: usize,
}

/// Greedy CTC decode of a [T, V+1] log-prob (or logit) matrix.
pub fn greedy_decode(scores: &[f32], t_len: usize, n_cls: usize) -> Vec<Emission> {
    let mut dec = StreamingDecoder::new(n_cls);
    let mut out = Vec::new();
    for t in 0..t_len {
        if let Some(e) = dec.push_row(&scores[t * n_cls..(t + 1) * n_cls]) {
            out.push(e);
        }
    }
    debug_assert_eq!(dec.frames_seen(), t_len);
    out.extend(dec.flush());
    out
}

/// Incremental greedy decoder. A run is finalized once a *different* argmax
/// symbol (or blank) is observed after it; at most the last run stays
/// pending and is released by [`StreamingDecoder::flush`]. The pending run
/// survives window resets (the runtime clears attention caches, never this
/// state), so boundary tokens are neither dropped nor double-emitted.
pub struct StreamingDecoder {
    n_cls: usize,
    blank: usize,
    prev: usize,
    pending: Option<Emission>,
    frame: usize,
}

impl StreamingDecoder {
    pub fn new(n_cls: usize) -> Self {
        Self {
            n_cls,
            blank: n_cls - 1,
            prev: n_cls - 1,
            pending: None,
            frame: 0,
        }
    }

    pub fn frames_seen(&self) -> usize {
        self.frame
    }

    /// Feed one frame of scores; returns the emission finalized by this
    /// frame, if any.
    pub fn push_row(&mut self, row: &[f32]) -> Option<Emission> {
        debug_assert_eq!(row.len(), self.n_cls);
        let mut best = 0usize;
        let mut best_v = row[0];
        for (k, &v) in row.iter().enumerate().skip(1) {
            if v > best_v {
                best_v = v;
                best = k;
            }
        }
        let t = self.frame;
        self.frame += 1;
        let mut out = None;
        if best != self.prev {
            out = self.pending.take();
            if best != self.blank {
                self.pending = Some(Emission { symbol: best, anchor: t });
            }
        }
        self.prev = best;
        out
    }

    /// Finalize the still-open run at end of stream.
    pub fn flush(&mut self) -> Option<Emission> {
        self.pending.take()
    }
}

/// Uniform [T, V+1] log-prob table, handy for oracle cross-checks.
pub fn uniform_logp(t_len: usize, n_cls: usize) -> Vec<f32> {
    vec![-(n_cls as f32).ln(); t_len * n_cls]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::kernels;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn graph_loss(logp: &[f32], t: usize, n: usize, labels: &[usize]) -> (f32, bool) {
        let mut g = Graph::new();
        let lp = g.leaf(&[t, n], logp.to_vec(), false).unwrap();
        let out = ctc_loss(&mut g, lp, labels).unwrap();
        (g.data(out.loss)[0], out.feasible)
    }

    #[test]
    fn uniform_t3_v2_single_label_matches_enumeration() {
        // T=3, V=2 (3 classes with blank), s=[0], uniform 1/3 per cell.
        // [DERIVED] exhaustive enumeration finds 6 collapsing paths of the 27,
        // so loss = -ln(6/27) = 1.5040774.
        let logp = uniform_logp(3, 3);
        let oracle = brute_force_ctc(&logp, 3, 3, &[0]).unwrap();
        // table cells are f32-rounded ln(1/3), so compare at f32 precision
        assert!((oracle - (27.0f64 / 6.0).ln()).abs() < 1e-6, "oracle={oracle}");
        let (loss, feasible) = graph_loss(&logp, 3, 3, &[0]);
        assert!(feasible);
        assert!((loss as f64 - oracle).abs() < 1e-6);
        assert!((loss - 1.5040774).abs() < 1e-5);
    }

    #[test]
    fn forward_backward_matches_brute_force_on_random_tables() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in 0..30 {
            let t = rng.gen_range(1..=6);
            let v = rng.gen_range(1..=3); // classes = v+1 <= 4, 4^6 paths max
            let n = v + 1;
            let mut logits = vec![0.0f32; t * n];
            for x in logits.iter_mut() {
                *x = rng.gen_range(-2.0..2.0);
            }
            let mut logp = logits.clone();
            for row in 0..t {
                kernels::log_softmax_row(&mut logp[row * n..(row + 1) * n]);
            }
            let max_l = t.min(3);
            let l = rng.gen_range(0..=max_l);
            let labels: Vec<usize> = (0..l).map(|_| rng.gen_range(0..v)).collect();
            let oracle = brute_force_ctc(&logp, t, n, &labels).unwrap();
            let (loss, feasible) = graph_loss(&logp, t, n, &labels);
            if oracle.is_infinite() {
                assert!(!feasible, "case {case}: oracle infeasible but loss {loss}");
            } else {
                assert!(feasible, "case {case}");
                assert!(
                    (loss as f64 - oracle).abs() < 1e-6,
                    "case {case}: fb={loss} oracle={oracle}"
                );
            }
        }
    }

    #[test]
    fn infeasible_label_is_flagged_infinite() {
        // two distinct labels cannot fit one frame
        let logp = uniform_logp(1, 3);
        let (loss, feasible) = graph_loss(&logp, 1, 3, &[0, 1]);
        assert!(!feasible);
        assert!(loss.is_infinite());
        // repeat needs a separating blank: [0,0] in 2 frames is infeasible
        let (_, feasible2) = graph_loss(&uniform_logp(2, 3), 2, 3, &[0, 0]);
        assert!(!feasible2);
        let (_, feasible3) = graph_loss(&uniform_logp(3, 3), 3, 3, &[0, 0]);
        assert!(feasible3);
    }

    #[test]
    fn empty_label_is_all_blanks() {
        let logp = uniform_logp(2, 3);
        let oracle = brute_force_ctc(&logp, 2, 3, &[]).unwrap();
        assert!((oracle - 2.0 * 3.0f64.ln()).abs() < 1e-6);
        let (loss, feasible) = graph_loss(&logp, 2, 3, &[]);
        assert!(feasible);
        assert!((loss as f64 - oracle).abs() < 1e-6);
    }

    #[test]
    fn gradient_through_log_softmax_passes_fd_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (t, n) = (4, 4);
        let x: Vec<f32> = (0..t * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels = vec![0usize, 2, 1];
        let rel = finite_diff_check(
            &|g: &mut Graph, leaf| {
                let lp = g.log_softmax_rows(leaf);
                Ok(ctc_loss(g, lp, &labels)?.loss)
            },
            &[t, n],
            &x,
            1e-3,
        )
        .unwrap();
        assert!(rel < 1e-3, "max rel err {rel}");
    }

    #[test]
    fn greedy_decode_collapses_runs_and_anchors_run_starts() {
        // argmax sequence: 0 0 blank 1 1 0 -> symbols [0, 1, 0], anchors [0, 3, 5]
        let n = 3;
        let hi = 0.0f32;
        let lo = -10.0f32;
        let rows: Vec<[f32; 3]> = vec![
            [hi, lo, lo],
            [hi, lo, lo],
            [lo, lo, hi],
            [lo, hi, lo],
            [lo, hi, lo],
            [hi, lo, lo],
        ];
        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        let out = greedy_decode(&flat, rows.len(), n);
        assert_eq!(
            out,
            vec![
                Emission { symbol: 0, anchor: 0 },
                Emission { symbol: 1, anchor: 3 },
                Emission { symbol: 0, anchor: 5 },
            ]
        );
    }

    #[test]
    fn streaming_decoder_matches_offline_decode() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (t, n) = (50, 5);
        let scores: Vec<f32> = (0..t * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let offline = greedy_decode(&scores, t, n);
        let mut dec = StreamingDecoder::new(n);
        let mut streamed = Vec::new();
        for row in scores.chunks(n) {
            if let Some(e) = dec.push_row(row) {
                streamed.push(e);
            }
        }
        streamed.extend(dec.flush());
        assert_eq!(streamed, offline);
    }

    #[test]
    fn run_finalizes_only_on_symbol_change() {
        // single non-blank row: run still open, nothing finalized
        let mut dec = StreamingDecoder::new(3);
        assert_eq!(dec.push_row(&[1.0, 0.0, 0.0]), None);
        // blank arrives: token 0 finalized at frame 0
        assert_eq!(
            dec.push_row(&[0.0, 0.0, 1.0]),
            Some(Emission { symbol: 0, anchor: 0 })
        );
        assert_eq!(dec.flush(), None);
    }

    #[test]
    fn spec_collapse_example() {
        // argmax rows [blank, a, a, blank, b] -> [a@1, b@4]
        let rows: Vec<[f32; 3]> = vec![
            [0.0, 0.0, 1.0],
            [1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 1.0, 0.0],
        ];
        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        let out = greedy_decode(&flat, 5, 3);
        assert_eq!(
            out,
            vec![
                Emission { symbol: 0, anchor: 1 },
                Emission { symbol: 1, anchor: 4 },
            ]
        );
        // all blank -> empty
        let blanks = vec![0.0f32, 0.0, 1.0].repeat(4);
        assert!(greedy_decode(&blanks, 4, 3).is_empty());
    }

    #[test]
    fn brute_force_guards_explosion() {
        let logp = uniform_logp(30, 5);
        assert!(matches!(
            brute_force_ctc(&logp, 30, 5, &[0]),
            Err(Error::Oracle(_))
        ));
    }

    #[test]
    fn loss_is_scale_invariant_to_graph_reuse() {
        // calling backward twice accumulates exactly twice the leaf grad
        let (t, n) = (3, 3);
        let mut g = Graph::new();
        let x: Vec<f32> = (0..t * n).map(|i| (i as f32) * 0.1 - 0.4).collect();
        let leaf = g.leaf(&[t, n], x, true).unwrap();
        let lp = g.log_softmax_rows(leaf);
        let out = ctc_loss(&mut g, lp, &[1]).unwrap();
        g.backward(out.loss).unwrap();
        let g1 = g.grad(leaf).unwrap().to_vec();
        g.backward(out.loss).unwrap();
        let g2 = g.grad(leaf).unwrap().to_vec();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((b - 2.0 * a).abs() < 1e-6);
        }
    }
}
