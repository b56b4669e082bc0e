//! Parameter storage, initialization, graph binding, and the causal
//! transformer block used by both the encoder and the unit decoder. The
//! block exists twice: once as graph ops (training) and once as a cached
//! row-at-a-time step (streaming inference). Both run the same kernels in
//! the same order, so their outputs are bit-identical.

use crate::autodiff::{causal_attention, Graph, TensorId};
use crate::error::{Error, Result};
use crate::kernels;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[derive(Clone, Debug)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    pub params: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.insert(
            name.to_string(),
            Param {
                shape: shape.to_vec(),
                data,
            },
        );
    }

    /// FNV-1a over all parameter bytes, for frozen-weights assertions.
    pub fn content_hash(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, p) in &self.params {
            if !name.starts_with(prefix) {
                continue;
            }
            for b in name.bytes().chain(p.data.iter().flat_map(|f| f.to_le_bytes())) {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f32> {
    let limit = (6.0f32 / (fan_in + fan_out) as f32).sqrt();
    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
}

pub struct ParamInit<'a> {
    set: &'a mut ParamSet,
    rng: ChaCha8Rng,
}

impl<'a> ParamInit<'a> {
    pub fn new(set: &'a mut ParamSet, seed: u64) -> Self {
        Self {
            set,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn matrix(&mut self, name: &str, rows: usize, cols: usize) {
        let data = xavier(&mut self.rng, rows, cols, rows * cols);
        self.set.insert(name, &[rows, cols], data);
    }

    pub fn embedding(&mut self, name: &str, rows: usize, cols: usize) {
        // wider than xavier: embeddings are the only signal path for ids
        let data: Vec<f32> = (0..rows * cols).map(|_| self.rng.gen_range(-0.5..0.5)).collect();
        self.set.insert(name, &[rows, cols], data);
    }

    pub fn zeros(&mut self, name: &str, n: usize) {
        self.set.insert(name, &[1, n], vec![0.0; n]);
    }

    pub fn ones(&mut self, name: &str, n: usize) {
        self.set.insert(name, &[1, n], vec![1.0; n]);
    }

    /// Damped Xavier noise plus identity on the leading square block, so the
    /// input's leading dimensions pass through at init (information-preserving
    /// init for projections that must not scramble positional codes early).
    pub fn matrix_eye(&mut self, name: &str, rows: usize, cols: usize) {
        let mut data = xavier(&mut self.rng, rows, cols, rows * cols);
        for x in data.iter_mut() {
            *x *= 0.25;
        }
        for i in 0..rows.min(cols) {
            data[i * cols + i] += 1.0;
        }
        self.set.insert(name, &[rows, cols], data);
    }

    /// Damped Xavier noise plus unit weights wiring input row `sel[j]` to
    /// output column j (or the transposed wiring).
    pub fn matrix_select(&mut self, name: &str, rows: usize, cols: usize, sel: &[usize], transpose: bool) {
        let mut data = xavier(&mut self.rng, rows, cols, rows * cols);
        for x in data.iter_mut() {
            *x *= 0.25;
        }
        for (j, &s) in sel.iter().enumerate() {
            if transpose {
                data[j * cols + s] += 1.0;
            } else {
                data[s * cols + j] += 1.0;
            }
        }
        self.set.insert(name, &[rows, cols], data);
    }

    /// ln1/attn/ln2/mlp parameter group for one transformer block.
    pub fn block(&mut self, prefix: &str, d_model: usize) {
        self.ones(&format!("{prefix}.ln1.g"), d_model);
        self.zeros(&format!("{prefix}.ln1.b"), d_model);
        for w in ["wq", "wk", "wv", "wo"] {
            self.matrix(&format!("{prefix}.attn.{w}"), d_model, d_model);
        }
        self.ones(&format!("{prefix}.ln2.g"), d_model);
        self.zeros(&format!("{prefix}.ln2.b"), d_model);
        self.matrix(&format!("{prefix}.mlp.w1"), d_model, 4 * d_model);
        self.zeros(&format!("{prefix}.mlp.b1"), 4 * d_model);
        self.matrix(&format!("{prefix}.mlp.w2"), 4 * d_model, d_model);
        self.zeros(&format!("{prefix}.mlp.b2"), d_model);
    }
}

/// Binds a ParamSet into a graph as leaves; `trainable` decides which leaves
/// carry `requires_grad`.
pub struct Binder {
    pub ids: BTreeMap<String, TensorId>,
}

impl Binder {
    pub fn bind<F>(g: &mut Graph, params: &ParamSet, trainable: F) -> Result<Binder>
    where
        F: Fn(&str) -> bool,
    {
        let mut ids = BTreeMap::new();
        for (name, p) in &params.params {
            let id = g.leaf(&p.shape, p.data.clone(), trainable(name))?;
            ids.insert(name.clone(), id);
        }
        Ok(Binder { ids })
    }

    pub fn id(&self, name: &str) -> Result<TensorId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("unbound parameter {name}")))
    }

    /// Grad per trainable parameter after backward; absent grads (parameter
    /// unused in this graph) are skipped.
    pub fn collect_grads(&self, g: &Graph) -> BTreeMap<String, Vec<f32>> {
        let mut out = BTreeMap::new();
        for (name, &id) in &self.ids {
            if g.requires_grad(id) {
                if let Some(gr) = g.grad(id) {
                    out.insert(name.clone(), gr.to_vec());
                }
            }
        }
        out
    }
}

/// Multi-head causal self-attention over x [T, d_model]: per-head
/// scaled-dot-product with a causal mask, heads concatenated, then wo.
pub fn multihead_causal_attention(
    g: &mut Graph,
    b: &Binder,
    prefix: &str,
    x: TensorId,
    num_heads: usize,
) -> Result<TensorId> {
    let d_model = g.shape(x)[1];
    if d_model % num_heads != 0 {
        return Err(Error::Config(format!(
            "d_model {d_model} not divisible by {num_heads} heads"
        )));
    }
    let dh = d_model / num_heads;
    let q = g.matmul(x, b.id(&format!("{prefix}.attn.wq"))?)?;
    let k = g.matmul(x, b.id(&format!("{prefix}.attn.wk"))?)?;
    let v = g.matmul(x, b.id(&format!("{prefix}.attn.wv"))?)?;
    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        heads.push(causal_attention(g, qh, kh, vh)?);
    }
    let cat = g.concat_cols(&heads)?;
    g.matmul(cat, b.id(&format!("{prefix}.attn.wo"))?)
}

/// Pre-LN transformer block: x + attn(ln1(x)), then + mlp(ln2(·)).
pub fn transformer_block(
    g: &mut Graph,
    b: &Binder,
    prefix: &str,
    x: TensorId,
    num_heads: usize,
) -> Result<TensorId> {
    let ln1g = b.id(&format!("{prefix}.ln1.g"))?;
    let ln1b = b.id(&format!("{prefix}.ln1.b"))?;
    let normed = g.layernorm(x, ln1g, ln1b)?;
    let attn = multihead_causal_attention(g, b, prefix, normed, num_heads)?;
    let x1 = g.add(x, attn)?;

    let ln2g = b.id(&format!("{prefix}.ln2.g"))?;
    let ln2b = b.id(&format!("{prefix}.ln2.b"))?;
    let normed2 = g.layernorm(x1, ln2g, ln2b)?;
    let h1 = g.matmul(normed2, b.id(&format!("{prefix}.mlp.w1"))?)?;
    let h1b = g.add_bias(h1, b.id(&format!("{prefix}.mlp.b1"))?)?;
    let act = g.gelu(h1b);
    let h2 = g.matmul(act, b.id(&format!("{prefix}.mlp.w2"))?)?;
    let h2b = g.add_bias(h2, b.id(&format!("{prefix}.mlp.b2"))?)?;
    g.add(x1, h2b)
}

/// Append-only key/value cache for one block's incremental evaluation.
#[derive(Clone, Debug, Default)]
pub struct BlockCache {
    pub k: Vec<f32>, // [t, d_model], flattened
    pub v: Vec<f32>,
    pub len: usize,
}

impl BlockCache {
    pub fn clear(&mut self) {
        self.k.clear();
        self.v.clear();
        self.len = 0;
    }
}

/// One incremental step of the same block on a single row. Bit-identical to
/// row `cache.len` of the graph version run on the full prefix.
pub fn transformer_block_step(
    params: &ParamSet,
    prefix: &str,
    cache: &mut BlockCache,
    x: &[f32],
    num_heads: usize,
) -> Result<Vec<f32>> {
    let d_model = x.len();
    let dh = d_model / num_heads;
    let ln1g = &params.get(&format!("{prefix}.ln1.g"))?.data;
    let ln1b = &params.get(&format!("{prefix}.ln1.b"))?.data;
    let mut normed = vec![0.0f32; d_model];
    kernels::layernorm_row(x, ln1g, ln1b, &mut normed);

    let wq = params.get(&format!("{prefix}.attn.wq"))?;
    let wk = params.get(&format!("{prefix}.attn.wk"))?;
    let wv = params.get(&format!("{prefix}.attn.wv"))?;
    let wo = params.get(&format!("{prefix}.attn.wo"))?;
    let q = kernels::matvec(&normed, &wq.data, d_model, d_model);
    let k = kernels::matvec(&normed, &wk.data, d_model, d_model);
    let v = kernels::matvec(&normed, &wv.data, d_model, d_model);
    cache.k.extend_from_slice(&k);
    cache.v.extend_from_slice(&v);
    cache.len += 1;
    let t = cache.len;

    let scale = 1.0f32 / (dh as f32).sqrt();
    let mut attn_out = vec![0.0f32; d_model];
    for h in 0..num_heads {
        let qh = &q[h * dh..(h + 1) * dh];
        // scores over the cached prefix, same dot order as matmul
        let mut scores = vec![0.0f32; t];
        for (j, s) in scores.iter_mut().enumerate() {
            let kj = &cache.k[j * d_model + h * dh..j * d_model + (h + 1) * dh];
            let mut acc = 0.0f32;
            for i in 0..dh {
                acc += qh[i] * kj[i];
            }
            *s = acc * scale;
        }
        kernels::softmax_row(&mut scores);
        for i in 0..dh {
            let mut acc = 0.0f32;
            for (j, &sc) in scores.iter().enumerate() {
                acc += sc * cache.v[j * d_model + h * dh + i];
            }
            attn_out[h * dh + i] = acc;
        }
    }
    let proj = kernels::matvec(&attn_out, &wo.data, d_model, d_model);
    let mut x1 = x.to_vec();
    kernels::add_assign(&mut x1, &proj);

    let ln2g = &params.get(&format!("{prefix}.ln2.g"))?.data;
    let ln2b = &params.get(&format!("{prefix}.ln2.b"))?.data;
    let mut normed2 = vec![0.0f32; d_model];
    kernels::layernorm_row(&x1, ln2g, ln2b, &mut normed2);
    let w1 = params.get(&format!("{prefix}.mlp.w1"))?;
    let b1 = &params.get(&format!("{prefix}.mlp.b1"))?.data;
    let w2 = params.get(&format!("{prefix}.mlp.w2"))?;
    let b2 = &params.get(&format!("{prefix}.mlp.b2"))?.data;
    let mut h1 = kernels::matvec(&normed2, &w1.data, d_model, 4 * d_model);
    kernels::add_assign(&mut h1, b1);
    for u in h1.iter_mut() {
        *u = kernels::gelu(*u);
    }
    let mut h2 = kernels::matvec(&h1, &w2.data, 4 * d_model, d_model);
    kernels::add_assign(&mut h2, b2);
    kernels::add_assign(&mut x1, &h2);
    Ok(x1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;

    fn toy_params(seed: u64, d: usize) -> ParamSet {
        let mut set = ParamSet::default();
        let mut init = ParamInit::new(&mut set, seed);
        init.block("blk", d);
        set
    }

    fn run_graph_block(params: &ParamSet, x: &[f32], t: usize, d: usize) -> Vec<f32> {
        let mut g = Graph::new();
        let b = Binder::bind(&mut g, params, |_| false).unwrap();
        let xin = g.leaf(&[t, d], x.to_vec(), false).unwrap();
        let out = transformer_block(&mut g, &b, "blk", xin, 2).unwrap();
        g.data(out).to_vec()
    }

    #[test]
    fn incremental_step_matches_graph_bit_exactly() {
        let d = 8;
        let t = 7;
        let params = toy_params(3, d);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f32> = (0..t * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let offline = run_graph_block(&params, &x, t, d);
        let mut cache = BlockCache::default();
        for row in 0..t {
            let out = transformer_block_step(&params, "blk", &mut cache, &x[row * d..(row + 1) * d], 2).unwrap();
            let want = &offline[row * d..(row + 1) * d];
            assert!(
                out.iter().zip(want).all(|(a, b)| a.to_bits() == b.to_bits()),
                "row {row} diverged"
            );
        }
    }

    #[test]
    fn block_is_causal() {
        let d = 8;
        let t = 5;
        let params = toy_params(4, d);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x: Vec<f32> = (0..t * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let base = run_graph_block(&params, &x, t, d);
        // perturb last row; rows 0..t-1 must be bit-identical
        for v in x[(t - 1) * d..].iter_mut() {
            *v += 10.0;
        }
        let pert = run_graph_block(&params, &x, t, d);
        assert!(base[..(t - 1) * d]
            .iter()
            .zip(&pert[..(t - 1) * d])
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(base[(t - 1) * d..] != pert[(t - 1) * d..]);
    }

    #[test]
    fn block_gradcheck_through_two_layers() {
        let d = 6;
        let t = 4;
        let mut set = ParamSet::default();
        let mut init = ParamInit::new(&mut set, 5);
        init.block("b0", d);
        init.block("b1", d);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Vec<f32> = (0..t * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let rel = finite_diff_check(
            &|g: &mut Graph, leaf| {
                let b = Binder::bind(g, &set, |_| false)?;
                let h0 = transformer_block(g, &b, "b0", leaf, 2)?;
                let h1 = transformer_block(g, &b, "b1", h0, 2)?;
                Ok(g.sum(h1))
            },
            &[t, d],
            &x,
            // larger step: the f32 forward pass adds ~1e-6 absolute noise to
            // the ~O(10) loss, which at eps=1e-3 swamps small coordinates
            1e-2,
        )
        .unwrap();
        assert!(rel < 1e-3, "max rel err {rel}");
    }

    #[test]
    fn binder_collects_grads_only_for_trainable() {
        let d = 6;
        let params = toy_params(7, d);
        let mut g = Graph::new();
        let b = Binder::bind(&mut g, &params, |n| n.contains("mlp")).unwrap();
        let x = g.leaf(&[3, d], vec![0.3; 3 * d], false).unwrap();
        let out = transformer_block(&mut g, &b, "blk", x, 2).unwrap();
        let loss = g.sum(out);
        g.backward(loss).unwrap();
        let grads = b.collect_grads(&g);
        assert!(grads.keys().all(|k| k.contains("mlp")));
        assert!(grads.contains_key("blk.mlp.w1"));
        assert!(!grads.contains_key("blk.attn.wq"));
    }

    #[test]
    fn param_hash_tracks_content() {
        let params = toy_params(8, 6);
        let h1 = params.content_hash("blk");
        let mut p2 = params.clone();
        assert_eq!(h1, p2.content_hash("blk"));
        p2.get_mut("blk.attn.wq").unwrap().data[0] += 1.0;
        assert_ne!(h1, p2.content_hash("blk"));
    }

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
}
