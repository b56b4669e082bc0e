//! Minimal reverse-mode autodiff over dense row-major f32 matrices.
//!
//! A [`Graph`] records operations as they execute; [`Graph::backward`] walks
//! the tape in reverse construction order. A graph and its tensors are
//! confined to one thread; independent graphs may run in parallel.

use crate::error::{shape_err, Error, Result};
use crate::kernels;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorId(pub(crate) usize);

pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub grad: Option<Vec<f32>>,
    pub requires_grad: bool,
}

type BackwardFn = Box<dyn Fn(&mut Graph)>;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Tensor>,
    backward_fns: Vec<Option<BackwardFn>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f32>,
        requires_grad: bool,
        bwd: Option<BackwardFn>,
    ) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Tensor {
            shape,
            data,
            grad: None,
            requires_grad,
        });
        self.backward_fns.push(bwd);
        TensorId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, shape: &[usize], data: Vec<f32>, requires_grad: bool) -> Result<TensorId> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Contract(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, None))
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f32>) -> Result<TensorId> {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&mut self, v: f32) -> TensorId {
        self.push(vec![1, 1], vec![v], false, None)
    }

    /// Id the next pushed node will receive; used by ops that build their
    /// backward closure before pushing the output.
    pub(crate) fn next_id(&self) -> TensorId {
        TensorId(self.nodes.len())
    }

    pub fn data(&self, id: TensorId) -> &[f32] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn accum_grad(&mut self, id: TensorId, delta: &[f32]) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => kernels::add_assign(g, delta),
            None => node.grad = Some(delta.to_vec()),
        }
    }

    fn dims2(&self, id: TensorId) -> (usize, usize) {
        let s = &self.nodes[id.0].shape;
        match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => panic!("expected matrix shape, got {s:?}"),
        }
    }

    /// Propagate from a scalar loss to every `requires_grad` leaf. Interior
    /// (non-leaf) grads are cleared afterwards, so repeated calls without
    /// zeroing accumulate leaf grads exactly once per call.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.accum_grad(loss, &[1.0]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            if let Some(f) = self.backward_fns[i].take() {
                f(self);
                self.backward_fns[i] = Some(f);
            }
        }
        // drop interior grads; only leaves keep accumulated gradients
        for i in 0..=loss.0 {
            if self.backward_fns[i].is_some() {
                self.nodes[i].grad = None;
            }
        }
        Ok(())
    }

    // ---- ops ----

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.dims2(a);
        let (kb, n) = self.dims2(b);
        if ka != kb {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let data = kernels::matmul(self.data(a), self.data(b), m, ka, n);
        let req = self.requires_grad(a) || self.requires_grad(b);
        let bwd: Option<BackwardFn> = if req {
            let out = TensorId(self.nodes.len());
            Some(Box::new(move |g: &mut Graph| {
                let Some(go) = g.nodes[out.0].grad.clone() else {
                    return;
                };
                let k = ka;
                if g.requires_grad(a) {
                    // dA = dC * B^T
                    let bt = transpose_raw(g.data(b), k, n);
                    let da = kernels::matmul(&go, &bt, m, n, k);
                    g.accum_grad(a, &da);
                }
                if g.requires_grad(b) {
                    // dB = A^T * dC
                    let at = transpose_raw(g.data(a), m, k);
                    let db = kernels::matmul(&at, &go, k, m, n);
                    g.accum_grad(b, &db);
                }
            }))
        } else {
            None
        };
        Ok(self.push(vec![m, n], data, req, bwd))
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.dims2(a);
        let data = transpose_raw(self.data(a), m, n);
        let req = self.requires_grad(a);
        let bwd: Option<BackwardFn> = if req {
            let out = TensorId(self.nodes.len());
            Some(Box::new(move |g: &mut Graph| {
                let Some(go) = g.nodes[out.0].grad.clone() else {
                    return;
                };
                let da = transpose_raw(&go, n, m);
                g.accum_grad(a, &da);
            }))
        } else {
            None
        };
        self.push(vec![n, m], data, req, bwd)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let data: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let req = self.requires_grad(a) || self.requires_grad(b);
        let bwd: Option<BackwardFn> = if req {
            let out = TensorId(self.nodes.len());
            Some(Box::new(move |g: &mut Graph| {
                let Some(go) = g.nodes[out.0].grad.clone() else {
                    return;
                };
                g.accum_grad(a, &go);
                g.accum_grad(b, &go);
            }))
        } else {
            None
        };
        Ok(self.push(self.nodes[a.0].shape.clone(), data, req, bwd))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let data: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let req = self.requires_grad(a) || self.requires_grad(b);
        let bwd: Option<BackwardFn> = if req {
            let out = TensorId(self.nodes.len());
            Some(Box::new(move |g: &mut Graph| {
                let Some(go) = g.nodes[out.0].grad.clone() else {
                    return;
                };
                if g.requires_grad(a) {
                    let da: Vec<f32> = go.iter().zip(g.data(b)).map(|(x, y)| x * y).collect();
                    g.accum_grad(a, &da);
                }
                if g.requires_grad(b) {
                    let db: Vec<f32> = go.iter().zip(g.data(a)).map(|(x, y)| x * y).collect();
                    g.accum_grad(b, &db);
                }
            }))
        } else {
            None
        };
        Ok(self.push(self.nodes[a.0].shape.clone(), data, req, bwd))
    }

    pub fn scale(&mut self, a: TensorId, c: f32) -> TensorId {
        let data: Vec<f32> = self.data(a).iter().map(|x| x * c).collect();
        let req = self.requires_grad(a);
        let bwd: Option<BackwardFn> = if req {
            let out = TensorId(self.nodes.len());
            Some(Box::new(move |g: &mut Graph| {
                let Some(go) = g.nodes[out.0].grad.clone() else {
                    return;
                };
                let da: Vec<f32> = go.iter().map(|x| x * c).collect();
                g.accum_grad(a, &da);
            }))
        } else {
            None
        };
        self.push(self.nodes[a.0].shape.clone(), data, req, bwd)
    }

    /// Per-column scaling: out[i,j] = x[i,j] * factors[j].
    pub fn scale_cols(&mut self, a: TensorId, factors: &[f32]) -> Result<TensorId> {
        let (m, n) = self.dims2(a);
        if factors.len() != n {
            return Err(shape_err("scale_cols", self.shape(a), &[factors.len()]));
        }
        let f = factors.to_vec();
        let mut data = self.data(a).to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] *= f[j];
            }
        }
        let req = self.requires_grad(a);
        let bwd: Option<BackwardFn> = if req {
            let out = TensorId(self.nodes.len());
            let f2 = f.clone();
            Some(Box::new(move |g: &mut Graph| {
                let Some(go) = g.nodes[out.0].grad.clone() else {
                    return;
                };
                let mut da = go;
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] *= f2[j];
                    }
                }
                g.accum_grad(a, &da);
            }))
        } else {
            None
        };
        Ok(self.push(self.nodes[a.0].shape.clone(), data, req, bwd))
    }

    /// Broadcast bias add over rows: x[m,n] + b[n].
    pub fn add_bias(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(x);
        let (bm, bn) = self.dims2(b);
        if bm * bn != n {
            return Err(shape_err("add_bias", self.shape(x), self.shape(b)));
        }
        let mut data = self.data(x).to_vec();
        let bias = self.data(b).to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += bias[j];
            }
        }
        let req = self.requires_grad(x) || self.requires_grad(b);
        let bwd: Option<BackwardFn> = if req {
            let out = TensorId(self.nodes.len());
            Some(Box::new(move |g: &mut Graph| {
                let Some(go) = g.nodes[out.0].grad.clone() else {
                    return;
                };
                if g.requires_grad(x) {
                    g.accum_grad(x, &go);
                }
                if g.requires_grad(b) {
                    let mut db = vec![0.0f32; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += go[i * n + j];
                        }
                    }
                    g.accum_grad(b, &db);
                }
            }))
        } else {
            None
        };
        Ok(self.push(self.nodes[x.0].shape.clone(), data, req, bwd))
    }

    /// Element-wise addition of a fixed buffer (e.g. additive attention mask
    /// with `-inf`, or positional features). Gradient passes straight through.
    pub fn add_const(&mut self, x: TensorId, c: &[f32]) -> Result<TensorId> {
        if self.data(x).len() != c.len() {
            return Err(shape_err("add_const", self.shape(x), &[c.len()]));
        }
        let data: Vec<f32> = self.data(x).iter().zip(c).map(|(a, b)| a + b).collect();
        let req = self.requires_grad(x);
        let bwd: Option<BackwardFn> = if req {
            let out = TensorId(self.nodes.len());
            Some(Box::new(move |g: &mut Graph| {
                let Some(go) = g.nodes[out.0].grad.clone() else {
                    return;
                };
                g.accum_grad(x, &go);
            }))
        } else {
            None
        };
        Ok(self.push(self.nodes[x.0].shape.clone(), data, req, bwd))
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let total: f32 = self.data(a).iter().sum();
        let req = self.requires_grad(a);
        let len = self.data(a).len();
        let bwd: Option<BackwardFn> = if req {
            let out = TensorId(self.nodes.len());
            Some(Box::new(move |g: &mut Graph| {
                let Some(go) = g.nodes[out.0].grad.clone() else {
                    return;
                };
                let da = vec![go[0]; len];
                g.accum_grad(a, &da);
            }))
        } else {
            None
        };
        self.push(vec![1, 1], vec![total], req, bwd)
    }

    pub fn softmax_rows(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.dims2(a);
        let mut data = self.data(a).to_vec();
        for i in 0..m {
            kernels::softmax_row(&mut data[i * n..(i + 1) * n]);
        }
        let req = self.requires_grad(a);
        let bwd: Option<BackwardFn> = if req {
            let out = TensorId(self.nodes.len());
            Some(Box::new(move |g: &mut Graph| {
                let Some(go) = g.nodes[out.0].grad.clone() else {
                    return;
                };
                let y = g.data(out).to_vec();
                let mut da = vec![0.0f32; m * n];
                for i in 0..m {
                    let mut dot = 0.0f32;
                    for j in 0..n {
                        dot += go[i * n + j] * y[i * n + j];
                    }
                    for j in 0..n {
                        da[i * n + j] = y[i * n + j] * (go[i * n + j] - dot);
                    }
                }
                g.accum_grad(a, &da);
            }))
        } else {
            None
        };
        self.push(vec![m, n], data, req, bwd)
    }

    pub fn log_softmax_rows(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.dims2(a);
        let mut data = self.data(a).to_vec();
        for i in 0..m {
            kernels::log_softmax_row(&mut data[i * n..(i + 1) * n]);
        }
        let req = self.requires_grad(a);
        let bwd: Option<BackwardFn> = if req {
            let out = TensorId(self.nodes.len());
            Some(Box::new(move |g: &mut Graph| {
                let Some(go) = g.nodes[out.0].grad.clone() else {
                    return;
                };
                let y = g.data(out).to_vec();
                let mut da = vec![0.0f32; m * n];
                for i in 0..m {
                    let mut rowsum = 0.0f32;
                    for j in 0..n {
                        rowsum += go[i * n + j];
                    }
                    for j in 0..n {
                        da[i * n + j] = go[i * n + j] - y[i * n + j].exp() * rowsum;
                    }
                }
                g.accum_grad(a, &da);
            }))
        } else {
            None
        };
        self.push(vec![m, n], data, req, bwd)
    }

    /// Row-wise log-sum-exp with the max-subtraction trick; output is [m, 1].
    pub fn logsumexp_rows(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.dims2(a);
        let src = self.data(a);
        let mut data = vec![0.0f32; m];
        for i in 0..m {
            data[i] = kernels::logsumexp_row(&src[i * n..(i + 1) * n]);
        }
        let req = self.requires_grad(a);
        let bwd: Option<BackwardFn> = if req {
            let out = TensorId(self.nodes.len());
            Some(Box::new(move |g: &mut Graph| {
                let Some(go) = g.nodes[out.0].grad.clone() else {
                    return;
                };
                let lse = g.data(out).to_vec();
                let x = g.data(a).to_vec();
                let mut da = vec![0.0f32; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = go[i] * (x[i * n + j] - lse[i]).exp();
                    }
                }
                g.accum_grad(a, &da);
            }))
        } else {
            None
        };
        self.push(vec![m, 1], data, req, bwd)
    }

    pub fn layernorm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(x);
        if n < 2 {
            return Err(Error::Config(format!(
                "layernorm requires at least 2 features per row, got {n}"
            )));
        }
        if self.data(gain).len() != n || self.data(bias).len() != n {
            return Err(shape_err("layernorm", self.shape(x), self.shape(gain)));
        }
        let mut data = vec![0.0f32; m * n];
        {
            let xs = self.data(x);
            let g = self.data(gain);
            let b = self.data(bias);
            for i in 0..m {
                let (src, dst) = (&xs[i * n..(i + 1) * n], &mut data[i * n..(i + 1) * n]);
                kernels::layernorm_row(src, g, b, dst);
            }
        }
        let req = self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(bias);
        let bwd: Option<BackwardFn> = if req {
            let out = TensorId(self.nodes.len());
            Some(Box::new(move |g: &mut Graph| {
                let Some(go) = g.nodes[out.0].grad.clone() else {
                    return;
                };
                let xs = g.data(x).to_vec();
                let gains = g.data(gain).to_vec();
                let mut dx = vec![0.0f32; m * n];
                let mut dgain = vec![0.0f32; n];
                let mut dbias = vec![0.0f32; n];
                for i in 0..m {
                    let row = &xs[i * n..(i + 1) * n];
                    let mut mean = 0.0f32;
                    for &v in row {
                        mean += v;
                    }
                    mean /= n as f32;
                    let mut var = 0.0f32;
                    for &v in row {
                        let d = v - mean;
                        var += d * d;
                    }
                    var /= n as f32;
                    let inv = 1.0f32 / (var + kernels::LN_EPS).sqrt();
                    // xhat = (x - mean) * inv
                    let xhat: Vec<f32> = row.iter().map(|&v| (v - mean) * inv).collect();
                    let grow = &go[i * n..(i + 1) * n];
                    for j in 0..n {
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                    }
                    // d xhat
                    let dxh: Vec<f32> = (0..n).map(|j| grow[j] * gains[j]).collect();
                    let mut sum_dxh = 0.0f32;
                    let mut sum_dxh_xhat = 0.0f32;
                    for j in 0..n {
                        sum_dxh += dxh[j];
                        sum_dxh_xhat += dxh[j] * xhat[j];
                    }
                    for j in 0..n {
                        dx[i * n + j] = inv
                            * (dxh[j] - sum_dxh / n as f32 - xhat[j] * sum_dxh_xhat / n as f32);
                    }
                }
                g.accum_grad(x, &dx);
                g.accum_grad(gain, &dgain);
                g.accum_grad(bias, &dbias);
            }))
        } else {
            None
        };
        Ok(self.push(vec![m, n], data, req, bwd))
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f32> = self.data(a).iter().map(|&x| kernels::gelu(x)).collect();
        let req = self.requires_grad(a);
        let bwd: Option<BackwardFn> = if req {
            let out = TensorId(self.nodes.len());
            Some(Box::new(move |g: &mut Graph| {
                let Some(go) = g.nodes[out.0].grad.clone() else {
                    return;
                };
                let x = g.data(a).to_vec();
                let da: Vec<f32> = go
                    .iter()
                    .zip(&x)
                    .map(|(&gv, &xv)| gv * kernels::gelu_deriv(xv))
                    .collect();
                g.accum_grad(a, &da);
            }))
        } else {
            None
        };
        self.push(self.nodes[a.0].shape.clone(), data, req, bwd)
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f32> = self.data(a).iter().map(|&x| x.tanh()).collect();
        let req = self.requires_grad(a);
        let bwd: Option<BackwardFn> = if req {
            let out = TensorId(self.nodes.len());
            Some(Box::new(move |g: &mut Graph| {
                let Some(go) = g.nodes[out.0].grad.clone() else {
                    return;
                };
                let y = g.data(out).to_vec();
                let da: Vec<f32> = go.iter().zip(&y).map(|(&gv, &yv)| gv * (1.0 - yv * yv)).collect();
                g.accum_grad(a, &da);
            }))
        } else {
            None
        };
        self.push(self.nodes[a.0].shape.clone(), data, req, bwd)
    }

    /// Round to the nearest integer with a straight-through backward pass:
    /// the rounding step contributes exactly identity to the gradient.
    pub fn round_st(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f32> = self.data(a).iter().map(|&x| x.round()).collect();
        let req = self.requires_grad(a);
        let bwd: Option<BackwardFn> = if req {
            let out = TensorId(self.nodes.len());
            Some(Box::new(move |g: &mut Graph| {
                let Some(go) = g.nodes[out.0].grad.clone() else {
                    return;
                };
                g.accum_grad(a, &go);
            }))
        } else {
            None
        };
        self.push(self.nodes[a.0].shape.clone(), data, req, bwd)
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (m, n) = self.dims2(a);
        if start + len > n {
            return Err(Error::Contract(format!(
                "slice_cols [{start}, {}) out of range for {n} columns",
                start + len
            )));
        }
        let src = self.data(a);
        let mut data = vec![0.0f32; m * len];
        for i in 0..m {
            data[i * len..(i + 1) * len].copy_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let req = self.requires_grad(a);
        let bwd: Option<BackwardFn> = if req {
            let out = TensorId(self.nodes.len());
            Some(Box::new(move |g: &mut Graph| {
                let Some(go) = g.nodes[out.0].grad.clone() else {
                    return;
                };
                let mut da = vec![0.0f32; m * n];
                for i in 0..m {
                    da[i * n + start..i * n + start + len]
                        .copy_from_slice(&go[i * len..(i + 1) * len]);
                }
                g.accum_grad(a, &da);
            }))
        } else {
            None
        };
        Ok(self.push(vec![m, len], data, req, bwd))
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (m, n) = self.dims2(a);
        if start + len > m {
            return Err(Error::Contract(format!(
                "slice_rows [{start}, {}) out of range for {m} rows",
                start + len
            )));
        }
        let data = self.data(a)[start * n..(start + len) * n].to_vec();
        let req = self.requires_grad(a);
        let bwd: Option<BackwardFn> = if req {
            let out = TensorId(self.nodes.len());
            Some(Box::new(move |g: &mut Graph| {
                let Some(go) = g.nodes[out.0].grad.clone() else {
                    return;
                };
                let mut da = vec![0.0f32; m * n];
                da[start * n..(start + len) * n].copy_from_slice(&go);
                g.accum_grad(a, &da);
            }))
        } else {
            None
        };
        Ok(self.push(vec![len, n], data, req, bwd))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of empty list".into()));
        }
        let (_, n) = self.dims2(parts[0]);
        let mut rows = 0usize;
        let mut data = Vec::new();
        let mut spans = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p);
            if pn != n {
                return Err(shape_err("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            spans.push((p, rows, pm));
            rows += pm;
            data.extend_from_slice(self.data(p));
        }
        let req = parts.iter().any(|&p| self.requires_grad(p));
        let bwd: Option<BackwardFn> = if req {
            let out = TensorId(self.nodes.len());
            Some(Box::new(move |g: &mut Graph| {
                let Some(go) = g.nodes[out.0].grad.clone() else {
                    return;
                };
                for &(p, row0, pm) in &spans {
                    if g.requires_grad(p) {
                        g.accum_grad(p, &go[row0 * n..(row0 + pm) * n]);
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(vec![rows, n], data, req, bwd))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of empty list".into()));
        }
        let (m, _) = self.dims2(parts[0]);
        let mut widths = Vec::with_capacity(parts.len());
        let mut n = 0usize;
        for &p in parts {
            let (pm, pn) = self.dims2(p);
            if pm != m {
                return Err(shape_err("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push((p, n, pn));
            n += pn;
        }
        let mut data = vec![0.0f32; m * n];
        for &(p, col0, pn) in &widths {
            let src = self.data(p);
            for i in 0..m {
                data[i * n + col0..i * n + col0 + pn].copy_from_slice(&src[i * pn..(i + 1) * pn]);
            }
        }
        let req = parts.iter().any(|&p| self.requires_grad(p));
        let bwd: Option<BackwardFn> = if req {
            let out = TensorId(self.nodes.len());
            Some(Box::new(move |g: &mut Graph| {
                let Some(go) = g.nodes[out.0].grad.clone() else {
                    return;
                };
                for &(p, col0, pn) in &widths {
                    if g.requires_grad(p) {
                        let mut dp = vec![0.0f32; m * pn];
                        for i in 0..m {
                            dp[i * pn..(i + 1) * pn]
                                .copy_from_slice(&go[i * n + col0..i * n + col0 + pn]);
                        }
                        g.accum_grad(p, &dp);
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(vec![m, n], data, req, bwd))
    }

    /// Gather rows from an embedding table; backward scatter-adds.
    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (v, d) = self.dims2(table);
        for &id in ids {
            if id >= v {
                return Err(Error::Contract(format!(
                    "embedding index {id} out of range for table with {v} rows"
                )));
            }
        }
        let src = self.data(table);
        let mut data = vec![0.0f32; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            data[i * d..(i + 1) * d].copy_from_slice(&src[id * d..(id + 1) * d]);
        }
        let req = self.requires_grad(table);
        let ids_owned = ids.to_vec();
        let rows = ids.len();
        let bwd: Option<BackwardFn> = if req {
            let out = TensorId(self.nodes.len());
            Some(Box::new(move |g: &mut Graph| {
                let Some(go) = g.nodes[out.0].grad.clone() else {
                    return;
                };
                let mut dt = vec![0.0f32; v * d];
                for (i, &id) in ids_owned.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += go[i * d + j];
                    }
                }
                g.accum_grad(table, &dt);
            }))
        } else {
            None
        };
        Ok(self.push(vec![rows, d], data, req, bwd))
    }

    /// Mean negative log-likelihood over the given row positions of a logits
    /// matrix. Stable (max-subtraction) and gradient-checked.
    pub fn ce_loss(&mut self, logits: TensorId, targets: &[(usize, usize)]) -> Result<TensorId> {
        let (m, n) = self.dims2(logits);
        if targets.is_empty() {
            return Err(Error::Contract("ce_loss with no target positions".into()));
        }
        for &(row, class) in targets {
            if row >= m || class >= n {
                return Err(Error::Contract(format!(
                    "ce_loss target ({row}, {class}) out of range for [{m}, {n}] logits"
                )));
            }
        }
        let x = self.data(logits);
        let mut total = 0.0f32;
        for &(row, class) in targets {
            let r = &x[row * n..(row + 1) * n];
            total += kernels::logsumexp_row(r) - r[class];
        }
        let loss = total / targets.len() as f32;
        let req = self.requires_grad(logits);
        let tgt = targets.to_vec();
        let bwd: Option<BackwardFn> = if req {
            let out = TensorId(self.nodes.len());
            Some(Box::new(move |g: &mut Graph| {
                let Some(go) = g.nodes[out.0].grad.clone() else {
                    return;
                };
                let x = g.data(logits).to_vec();
                let scale = go[0] / tgt.len() as f32;
                let mut dx = vec![0.0f32; m * n];
                for &(row, class) in &tgt {
                    let mut p = x[row * n..(row + 1) * n].to_vec();
                    kernels::softmax_row(&mut p);
                    for j in 0..n {
                        dx[row * n + j] += scale * (p[j] - if j == class { 1.0 } else { 0.0 });
                    }
                }
                g.accum_grad(logits, &dx);
            }))
        } else {
            None
        };
        Ok(self.push(vec![1, 1], vec![loss], req, bwd))
    }
}

pub(crate) fn transpose_raw(a: &[f32], m: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Additive causal mask for a [t, t] score matrix: 0 on and below the
/// diagonal, -inf above.
pub fn causal_mask(t: usize) -> Vec<f32> {
    let mut mask = vec![0.0f32; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            mask[i * t + j] = f32::NEG_INFINITY;
        }
    }
    mask
}

/// Single-head scaled dot-product attention with a causal mask. Output row t
/// depends only on rows 0..=t of `k` and `v`.
pub fn causal_attention(g: &mut Graph, q: TensorId, k: TensorId, v: TensorId) -> Result<TensorId> {
    let qs = g.shape(q).to_vec();
    let ks = g.shape(k).to_vec();
    let vs = g.shape(v).to_vec();
    if qs != ks || qs != vs {
        return Err(shape_err("causal_attention", &qs, &ks));
    }
    let (t, d) = (qs[0], qs[1]);
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / (d as f32).sqrt());
    let masked = g.add_const(scaled, &causal_mask(t))?;
    let attn = g.softmax_rows(masked);
    g.matmul(attn, v)
}

/// Central-difference gradient check. `f` must rebuild the same scalar loss
/// from a fresh leaf; determinism is verified with two forward passes.
/// Returns the max over coordinates of |analytic - numeric| / (|analytic| + |numeric| + 1e-8).
pub fn finite_diff_check<F>(f: &F, shape: &[usize], x: &[f32], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, TensorId) -> Result<TensorId>,
{
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::Oracle(format!("eps {eps} outside [1e-5, 1e-2]")));
    }
    let run = |xs: &[f32]| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.leaf(shape, xs.to_vec(), false)?;
        let loss = f(&mut g, leaf)?;
        if g.data(loss).len() != 1 {
            return Err(Error::Contract("finite_diff_check needs a scalar loss".into()));
        }
        Ok(g.data(loss)[0] as f64)
    };
    let v1 = run(x)?;
    let v2 = run(x)?;
    if v1.to_bits() != v2.to_bits() {
        return Err(Error::Oracle(
            "non-deterministic function under finite-difference check".into(),
        ));
    }

    let mut g = Graph::new();
    let leaf = g.leaf(shape, x.to_vec(), true)?;
    let loss = f(&mut g, leaf)?;
    g.backward(loss)?;
    let analytic: Vec<f64> = g
        .grad(leaf)
        .ok_or_else(|| Error::Oracle("no gradient reached the input leaf".into()))?
        .iter()
        .map(|&v| v as f64)
        .collect();

    let mut max_rel = 0.0f64;
    let mut xs = x.to_vec();
    for i in 0..xs.len() {
        let orig = xs[i];
        xs[i] = orig + eps as f32;
        let fp = run(&xs)?;
        xs[i] = orig - eps as f32;
        let fm = run(&xs)?;
        xs[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs() + 1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
