//! Finite scalar quantization: tanh-bound each dimension, snap to a
//! symmetric odd-level grid in [-1, 1], straight-through gradients. Codes
//! map to integers by a mixed-radix rule with dimension 0 most significant
//! and grid ordering (-1 .. +1) -> (0 .. L-1).

use crate::autodiff::{Graph, TensorId};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct FsqConfig {
    pub levels: Vec<usize>,
}

impl Default for FsqConfig {
    fn default() -> Self {
        Self { levels: vec![5, 5, 5, 5] }
    }
}

impl FsqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("FSQ needs at least one level entry".into()));
        }
        for &l in &self.levels {
            if l < 3 || l % 2 == 0 {
                return Err(Error::Config(format!("FSQ levels must be odd and >= 3, got {l}")));
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.levels.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.levels.iter().product()
    }

    fn half(&self, dim: usize) -> f32 {
        (self.levels[dim] - 1) as f32 / 2.0
    }
}

/// Graph-side quantization of z_low [n, K]: forward emits grid values,
/// backward treats the rounding as identity (straight-through), so gradients
/// match the tanh-bounded path exactly.
pub fn fsq_quantize_graph(g: &mut Graph, cfg: &FsqConfig, z_low: TensorId) -> Result<TensorId> {
    let shape = g.shape(z_low).to_vec();
    if shape.len() != 2 || shape[1] != cfg.k() {
        return Err(Error::Shape {
            op: "fsq_quantize",
            left: format!("{shape:?}"),
            right: format!("[n, {}]", cfg.k()),
        });
    }
    let halves: Vec<f32> = (0..cfg.k()).map(|d| cfg.half(d)).collect();
    let inv: Vec<f32> = halves.iter().map(|h| 1.0 / h).collect();
    let bounded = g.tanh(z_low);
    let scaled = g.scale_cols(bounded, &halves)?;
    let rounded = g.round_st(scaled);
    g.scale_cols(rounded, &inv)
}

/// Inference-side quantization of one K-dim row: returns (grid row, index).
pub fn fsq_quantize_row(cfg: &FsqConfig, row: &[f32]) -> Result<(Vec<f32>, usize)> {
    if row.len() != cfg.k() {
        return Err(Error::Shape {
            op: "fsq_quantize_row",
            left: format!("[{}]", row.len()),
            right: format!("[{}]", cfg.k()),
        });
    }
    let mut grid = vec![0.0f32; cfg.k()];
    for (d, &x) in row.iter().enumerate() {
        let h = cfg.half(d);
        // multiply by the reciprocal, exactly like the graph path's
        // scale_cols, so streamed and offline grids are bit-identical
        grid[d] = (x.tanh() * h).round() * (1.0 / h);
    }
    let q = code_to_index(cfg, &grid)?;
    Ok((grid, q))
}

/// Mixed-radix index of a grid row; off-grid values are a contract error.
pub fn code_to_index(cfg: &FsqConfig, code: &[f32]) -> Result<usize> {
    if code.len() != cfg.k() {
        return Err(Error::Contract(format!(
            "code length {} != {} dims",
            code.len(),
            cfg.k()
        )));
    }
    let mut q = 0usize;
    for (d, &c) in code.iter().enumerate() {
        let h = cfg.half(d);
        let pos_f = (c + 1.0) * h; // (-1..1) grid -> (0..L-1)
        let pos = pos_f.round();
        if (pos_f - pos).abs() > 1e-4 || pos < 0.0 || pos as usize >= cfg.levels[d] {
            return Err(Error::Contract(format!(
                "value {c} in dim {d} is not on the {}-level grid",
                cfg.levels[d]
            )));
        }
        q = q * cfg.levels[d] + pos as usize;
    }
    Ok(q)
}

pub fn index_to_code(cfg: &FsqConfig, mut q: usize) -> Result<Vec<f32>> {
    if q >= cfg.codebook_size() {
        return Err(Error::Contract(format!(
            "index {q} out of range for codebook of {}",
            cfg.codebook_size()
        )));
    }
    let mut code = vec![0.0f32; cfg.k()];
    for d in (0..cfg.k()).rev() {
        let l = cfg.levels[d];
        let pos = q % l;
        q /= l;
        code[d] = pos as f32 / cfg.half(d) - 1.0;
    }
    Ok(code)
}

pub fn codebook_utilization(cfg: &FsqConfig, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Contract("utilization of empty index set".into()));
    }
    let mut seen = vec![false; cfg.codebook_size()];
    let mut unique = 0usize;
    for &q in indices {
        if q >= seen.len() {
            return Err(Error::Contract(format!("index {q} out of codebook range")));
        }
        if !seen[q] {
            seen[q] = true;
            unique += 1;
        }
    }
    Ok(unique as f64 / cfg.codebook_size() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn saturation_hits_grid_extremes() {
        let cfg = FsqConfig { levels: vec![3] };
        let inputs = [-10.0f32, 0.0, 10.0];
        let want = [-1.0f32, 0.0, 1.0];
        for (x, w) in inputs.iter().zip(&want) {
            let (grid, _) = fsq_quantize_row(&cfg, &[*x]).unwrap();
            assert_eq!(grid[0], *w);
        }
    }

    #[test]
    fn quantize_is_idempotent_on_outputs() {
        let cfg = FsqConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let row: Vec<f32> = (0..cfg.k()).map(|_| rng.gen_range(-3.0f32..3.0)).collect();
            let (grid, q) = fsq_quantize_row(&cfg, &row).unwrap();
            // re-quantizing the atanh pre-image of a grid point returns it
            let pre: Vec<f32> = grid.iter().map(|&v| v.clamp(-0.999, 0.999).atanh()).collect();
            let (grid2, q2) = fsq_quantize_row(&cfg, &pre).unwrap();
            assert_eq!(q, q2);
            assert_eq!(grid, grid2);
        }
    }

    #[test]
    fn bounded_error_half_step() {
        let cfg = FsqConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let max_half_step: f32 = cfg
            .levels
            .iter()
            .map(|&l| 1.0 / (l - 1) as f32)
            .fold(0.0, f32::max);
        for _ in 0..10_000 {
            let row: Vec<f32> = (0..cfg.k()).map(|_| rng.gen_range(-4.0f32..4.0)).collect();
            let (grid, _) = fsq_quantize_row(&cfg, &row).unwrap();
            for (d, &x) in row.iter().enumerate() {
                assert!((grid[d] - x.tanh()).abs() <= max_half_step + 1e-6);
            }
        }
    }

    #[test]
    fn bijection_exhaustive() {
        for levels in [vec![3, 3], vec![5, 5, 5, 5], vec![3, 5, 7]] {
            let cfg = FsqConfig { levels };
            assert!(cfg.codebook_size() <= 10_000);
            for q in 0..cfg.codebook_size() {
                let code = index_to_code(&cfg, q).unwrap();
                assert_eq!(code_to_index(&cfg, &code).unwrap(), q);
            }
        }
    }

    #[test]
    fn mixed_radix_ordering() {
        let cfg = FsqConfig { levels: vec![3, 3] };
        // q=0 -> all-minimum row
        assert_eq!(index_to_code(&cfg, 0).unwrap(), vec![-1.0, -1.0]);
        // dim 0 most significant under (-1,0,+1)->(0,1,2):
        // (-1,+1) -> 0*3+2 = 2 ; (0,+1) -> 1*3+2 = 5
        assert_eq!(code_to_index(&cfg, &[-1.0, 1.0]).unwrap(), 2);
        assert_eq!(code_to_index(&cfg, &[0.0, 1.0]).unwrap(), 5);
        assert!(code_to_index(&cfg, &[0.3, 0.0]).is_err());
    }

    #[test]
    fn graph_forward_matches_row_path_and_st_gradient() {
        let cfg = FsqConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 6;
        let z: Vec<f32> = (0..n * cfg.k()).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
        let mut g = Graph::new();
        let zid = g.leaf(&[n, cfg.k()], z.clone(), false).unwrap();
        let out = fsq_quantize_graph(&mut g, &cfg, zid).unwrap();
        for i in 0..n {
            let (grid, _) = fsq_quantize_row(&cfg, &z[i * cfg.k()..(i + 1) * cfg.k()]).unwrap();
            assert_eq!(&g.data(out)[i * cfg.k()..(i + 1) * cfg.k()], &grid[..]);
        }

        // straight-through: grad of sum(quantize(z)) equals grad of the
        // bounded (tanh * half / half) path, i.e. the FD check is run against
        // the UNQUANTIZED path and the analytic grad comes from the ST graph
        let halves: Vec<f32> = (0..cfg.k()).map(|d| (cfg.levels[d] - 1) as f32 / 2.0).collect();
        let inv: Vec<f32> = halves.iter().map(|h| 1.0 / h).collect();
        let z2: Vec<f32> = (0..cfg.k() * 3).map(|_| rng.gen_range(-1.5f32..1.5)).collect();
        let mut gq = Graph::new();
        let leaf_q = gq.leaf(&[3, cfg.k()], z2.clone(), true).unwrap();
        let q_out = fsq_quantize_graph(&mut gq, &cfg, leaf_q).unwrap();
        let loss_q = gq.sum(q_out);
        gq.backward(loss_q).unwrap();
        let st_grad = gq.grad(leaf_q).unwrap().to_vec();

        let rel = finite_diff_check(
            &|g: &mut Graph, leaf| {
                let b = g.tanh(leaf);
                let s = g.scale_cols(b, &halves)?;
                let back = g.scale_cols(s, &inv)?;
                Ok(g.sum(back))
            },
            &[3, cfg.k()],
            &z2,
            1e-3,
        )
        .unwrap();
        assert!(rel < 1e-3, "bounded path FD err {rel}");

        // analytic grads of ST path == analytic grads of bounded path
        let mut gb = Graph::new();
        let leaf_b = gb.leaf(&[3, cfg.k()], z2, true).unwrap();
        let b = gb.tanh(leaf_b);
        let s = gb.scale_cols(b, &halves).unwrap();
        let back = gb.scale_cols(s, &inv).unwrap();
        let loss_b = gb.sum(back);
        gb.backward(loss_b).unwrap();
        let bounded_grad = gb.grad(leaf_b).unwrap().to_vec();
        assert_eq!(st_grad, bounded_grad);
    }

    #[test]
    fn utilization_counts_unique() {
        let cfg = FsqConfig { levels: vec![5, 5] };
        assert!((codebook_utilization(&cfg, &[7, 7, 7]).unwrap() - 1.0 / 25.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let idx: Vec<usize> = (0..5000)
            .map(|_| {
                let row: Vec<f32> = (0..2).map(|_| rng.gen_range(-3.0f32..3.0)).collect();
                fsq_quantize_row(&cfg, &row).unwrap().1
            })
            .collect();
        assert!(codebook_utilization(&cfg, &idx).unwrap() > 0.9);
        assert!(codebook_utilization(&cfg, &[]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(FsqConfig { levels: vec![4] }.validate().is_err());
        assert!(FsqConfig { levels: vec![1] }.validate().is_err());
        assert!(FsqConfig { levels: vec![] }.validate().is_err());
        assert!(FsqConfig::default().validate().is_ok());
    }
}
