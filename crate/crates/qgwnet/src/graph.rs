//! Sparse directed sensor graphs, random-walk transition matrices, and the
//! truncated two-direction diffusion convolution.
//!
//! The diffusion filter applied to node features `X` is
//!
//! ```text
//! sum_{k=0}^{K-1} ( theta[k,1] * Pf^k + theta[k,2] * Pb^k ) X
//! ```
//!
//! with `Pf = D_out^-1 W` and `Pb = D_in^-1 W^T` (forward and reverse
//! random-walk transitions). Matrix powers are never materialized: the
//! recursion `T_{k+1} = P . T_k` uses one sparse-dense product per step, so
//! the cost is `O(K |E|)` per channel and only the sparse neighbourhood of
//! each node is touched.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use crate::autodiff::tape::{BackFn, GradBuffer, Node, Var};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl Csr {
    /// Builds from `(row, col, value)` triples; duplicate coordinates are
    /// rejected.
    pub fn from_triples(rows: usize, cols: usize, triples: &[(usize, usize, f64)]) -> Result<Self> {
        let mut sorted: Vec<(usize, usize, f64)> = triples.to_vec();
        sorted.sort_by_key(|&(r, c, _)| (r, c));
        for w in sorted.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                return Err(Error::invalid(
                    "Csr::from_triples",
                    format!("duplicate entry at ({}, {})", w[0].0, w[0].1),
                ));
            }
        }
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values = Vec::with_capacity(sorted.len());
        for &(r, c, v) in &sorted {
            if r >= rows || c >= cols {
                return Err(Error::invalid(
                    "Csr::from_triples",
                    format!("entry ({r}, {c}) outside {rows}x{cols}"),
                ));
            }
            indptr[r + 1] += 1;
            indices.push(c);
            values.push(v);
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Ok(Csr {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Entries of row `i` as `(col, value)` pairs.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[i]..self.indptr[i + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn triples(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    pub fn transpose(&self) -> Csr {
        let triples: Vec<(usize, usize, f64)> =
            self.triples().map(|(r, c, v)| (c, r, v)).collect();
        Csr::from_triples(self.cols, self.rows, &triples).expect("transpose preserves validity")
    }

    /// Row-normalizes in place semantics: rows with zero sum stay zero rows.
    pub fn row_normalized(&self) -> Csr {
        let mut out = self.clone();
        for r in 0..self.rows {
            let span = self.indptr[r]..self.indptr[r + 1];
            let total: f64 = self.values[span.clone()].iter().sum();
            if total > 0.0 {
                for v in &mut out.values[span] {
                    *v /= total;
                }
            }
        }
        out
    }

    /// Dense row-major copy, for oracles and small problems.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.rows * self.cols];
        for (r, c, v) in self.triples() {
            d[r * self.cols + c] = v;
        }
        d
    }
}

/// Directed weighted graph of sensor locations with planar coordinates in
/// meters. Edges are non-symmetric; the adjacency and its transpose are both
/// kept in row-compressed form.
#[derive(Debug, Clone)]
pub struct SensorGraph {
    coords: Vec<(f64, f64)>,
    weights: Csr,
    weights_t: Csr,
}

impl SensorGraph {
    pub fn new(coords: Vec<(f64, f64)>, edges: Vec<(usize, usize, f64)>) -> Result<Self> {
        let n = coords.len();
        for &(s, d, w) in &edges {
            if s >= n || d >= n {
                return Err(Error::invalid(
                    "SensorGraph",
                    format!("edge ({s}, {d}) references missing node (N = {n})"),
                ));
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::invalid(
                    "SensorGraph",
                    format!("edge ({s}, {d}) has invalid weight {w}"),
                ));
            }
        }
        let weights = Csr::from_triples(n, n, &edges)?;
        let weights_t = weights.transpose();
        Ok(SensorGraph {
            coords,
            weights,
            weights_t,
        })
    }

    pub fn node_count(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[(f64, f64)] {
        &self.coords
    }

    pub fn weights(&self) -> &Csr {
        &self.weights
    }

    pub fn weights_transposed(&self) -> &Csr {
        &self.weights_t
    }

    pub fn edge_count(&self) -> usize {
        self.weights.nnz()
    }

    /// Writes the `QGW-GRAPH v1` text format: nodes ordered by id, then
    /// edges ordered by (src, dst). Weights round-trip bitwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("QGW-GRAPH v1\n");
        let _ = writeln!(out, "N {}", self.node_count());
        for (i, (x, y)) in self.coords.iter().enumerate() {
            let _ = writeln!(out, "node {} {} {}", i, x, y);
        }
        for (s, d, w) in self.weights.triples() {
            let _ = writeln!(out, "edge {} {} {}", s, d, w);
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let p = path.display().to_string();
        let mut offset = 0u64;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if header != "QGW-GRAPH v1" {
            return Err(Error::format(&p, "expected header 'QGW-GRAPH v1'", 0));
        }
        offset += header.len() as u64 + 1;
        let nline = lines.next().unwrap_or("");
        let n: usize = nline
            .strip_prefix("N ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(&p, "expected 'N <count>'", offset))?;
        offset += nline.len() as u64 + 1;

        let mut coords: Vec<Option<(f64, f64)>> = vec![None; n];
        let mut edges = Vec::new();
        for line in lines {
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                ["node", id, x, y] => {
                    let id: usize = id
                        .parse()
                        .map_err(|_| Error::format(&p, "bad node id", offset))?;
                    if id >= n {
                        return Err(Error::format(&p, format!("node id {id} >= N"), offset));
                    }
                    let x: f64 = x.parse().map_err(|_| Error::format(&p, "bad node x", offset))?;
                    let y: f64 = y.parse().map_err(|_| Error::format(&p, "bad node y", offset))?;
                    coords[id] = Some((x, y));
                }
                ["edge", s, d, w] => {
                    let s: usize = s.parse().map_err(|_| Error::format(&p, "bad edge src", offset))?;
                    let d: usize = d.parse().map_err(|_| Error::format(&p, "bad edge dst", offset))?;
                    let w: f64 = w.parse().map_err(|_| Error::format(&p, "bad edge weight", offset))?;
                    edges.push((s, d, w));
                }
                [] => {}
                _ => return Err(Error::format(&p, format!("unrecognized line '{line}'"), offset)),
            }
            offset += line.len() as u64 + 1;
        }
        let coords: Vec<(f64, f64)> = coords
            .into_iter()
            .enumerate()
            .map(|(i, c)| c.ok_or_else(|| Error::format(&p, format!("node {i} missing"), offset)))
            .collect::<Result<_>>()?;
        SensorGraph::new(coords, edges)
    }
}

/// Forward (`D_out^-1 W`) and backward (`D_in^-1 W^T`) transition matrices,
/// immutable and shareable across concurrent forward passes. Transposes are
/// prebuilt for the reverse pass of [`spmm`].
#[derive(Debug, Clone)]
pub struct TransitionMatrices {
    pub forward: Arc<Csr>,
    pub backward: Arc<Csr>,
    forward_t: Arc<Csr>,
    backward_t: Arc<Csr>,
}

impl TransitionMatrices {
    pub fn node_count(&self) -> usize {
        self.forward.rows()
    }
}

/// Row-normalizes the adjacency in both directions. Zero-degree rows stay
/// zero rows (absorbing nodes), so every row sums to 1 or to 0.
pub fn build_transition_matrices(g: &SensorGraph) -> TransitionMatrices {
    let forward = g.weights().row_normalized();
    let backward = g.weights_transposed().row_normalized();
    let forward_t = forward.transpose();
    let backward_t = backward.transpose();
    TransitionMatrices {
        forward: Arc::new(forward),
        backward: Arc::new(backward),
        forward_t: Arc::new(forward_t),
        backward_t: Arc::new(backward_t),
    }
}

/// Diffusion filter parameters: `K` steps, two directions, and a 1x1
/// channel-mixing kernel per (step, direction).
#[derive(Debug, Clone)]
pub struct DiffusionFilter {
    pub steps: usize,
    pub theta: Tensor,
}

impl DiffusionFilter {
    pub fn new(steps: usize, theta: Tensor) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("DiffusionFilter", "K must be >= 1"));
        }
        if theta.ndim() != 4 || theta.shape()[0] != steps || theta.shape()[1] != 2 {
            return Err(Error::invalid(
                "DiffusionFilter",
                format!("theta must be (K, 2, c_in, c_out), got {:?}", theta.shape()),
            ));
        }
        Ok(DiffusionFilter { steps, theta })
    }
}

fn spmm_kernel(p: &Csr, x: &[f64], batch: usize, n: usize, c: usize, out: &mut [f64]) {
    for b in 0..batch {
        let xb = &x[b * n * c..(b + 1) * n * c];
        let ob = &mut out[b * n * c..(b + 1) * n * c];
        for i in 0..n {
            for (j, w) in p.row(i) {
                let src = &xb[j * c..(j + 1) * c];
                let dst = &mut ob[i * c..(i + 1) * c];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
    }
}

/// Sparse-dense product over the node axis: `y[..., i, c] = sum_j P[i, j]
/// x[..., j, c]`. Differentiable in `x`; `P` is a constant.
pub fn spmm<'t>(p: &Arc<Csr>, p_t: &Arc<Csr>, x: Var<'t>) -> Result<Var<'t>> {
    let tape = x.tape;
    let nodes = tape.nodes();
    let xv = &nodes[x.idx].value;
    if xv.ndim() < 2 {
        return Err(Error::invalid("spmm", format!("need (..., N, C), got {:?}", xv.shape())));
    }
    let c = *xv.shape().last().unwrap();
    let n = xv.shape()[xv.ndim() - 2];
    if n != p.rows() {
        return Err(Error::ShapeMismatch {
            op: "spmm",
            lhs: vec![p.rows(), p.cols()],
            rhs: xv.shape().to_vec(),
        });
    }
    let batch: usize = xv.shape()[..xv.ndim() - 2].iter().product();
    let mut data = vec![0.0; xv.len()];
    spmm_kernel(p, xv.data(), batch, n, c, &mut data);
    let out = Tensor::from_vec(xv.shape().to_vec(), data)?;
    let needs = nodes[x.idx].needs_grad;
    let (xi, len) = (x.idx, xv.len());
    let p_t = Arc::clone(p_t);
    drop(nodes);
    let back: Option<BackFn> = needs.then(|| {
        Box::new(move |g: &[f64], _nodes: &[Node], buf: &mut GradBuffer| {
            spmm_kernel(&p_t, g, batch, n, c, buf.slot(xi, len));
        }) as BackFn
    });
    tape.push("spmm", out, needs, back)
}

/// Truncated two-direction diffusion convolution with channel mixing.
///
/// `x` is `(..., N, C_in)`, `theta` is `(K, 2, C_in, C_out)`; power 0 is the
/// identity, so `K = 1` reduces to `(theta[0,0] + theta[0,1]) . X`.
/// Differentiable w.r.t. both `x` and `theta`.
pub fn diffusion_convolution<'t>(
    x: Var<'t>,
    tm: &TransitionMatrices,
    theta: Var<'t>,
    k_steps: usize,
) -> Result<Var<'t>> {
    let x_shape = x.shape();
    let th_shape = theta.shape();
    if k_steps == 0 {
        return Err(Error::invalid("diffusion_convolution", "K must be >= 1"));
    }
    if th_shape.len() != 4 || th_shape[0] != k_steps || th_shape[1] != 2 {
        return Err(Error::invalid(
            "diffusion_convolution",
            format!("theta must be (K={k_steps}, 2, c_in, c_out), got {th_shape:?}"),
        ));
    }
    if x_shape.len() < 2 || x_shape[x_shape.len() - 2] != tm.node_count() {
        return Err(Error::ShapeMismatch {
            op: "diffusion_convolution",
            lhs: x_shape.clone(),
            rhs: vec![tm.node_count(), th_shape[2]],
        });
    }
    let c_in = *x_shape.last().unwrap();
    let c_out = th_shape[3];
    if th_shape[2] != c_in {
        return Err(Error::ShapeMismatch {
            op: "diffusion_convolution",
            lhs: x_shape,
            rhs: th_shape,
        });
    }

    let rows: usize = x_shape[..x_shape.len() - 1].iter().product();
    let mut out_shape = x_shape.clone();
    *out_shape.last_mut().unwrap() = c_out;

    let mix = |z: Var<'t>, k: usize, dir: usize| -> Result<Var<'t>> {
        let th = theta
            .slice(0, k, k + 1)?
            .slice(1, dir, dir + 1)?
            .reshape(&[c_in, c_out])?;
        z.reshape(&[rows, c_in])?.matmul(th)?.reshape(&out_shape)
    };

    // k = 0: the identity power, both directions.
    let mut acc = mix(x, 0, 0)?.add(mix(x, 0, 1)?)?;
    let mut z_fwd = x;
    let mut z_bwd = x;
    for k in 1..k_steps {
        z_fwd = spmm(&tm.forward, &tm.forward_t, z_fwd)?;
        z_bwd = spmm(&tm.backward, &tm.backward_t, z_bwd)?;
        acc = acc.add(mix(z_fwd, k, 0)?)?;
        acc = acc.add(mix(z_bwd, k, 1)?)?;
    }
    Ok(acc)
}

/// Dense oracle for the diffusion convolution using explicit matrix powers;
/// test-support code, quadratic in N.
pub fn diffusion_dense_oracle(
    x: &Tensor,
    tm: &TransitionMatrices,
    theta: &Tensor,
    k_steps: usize,
) -> Result<Tensor> {
    let n = tm.node_count();
    let c_in = *x.shape().last().unwrap();
    let c_out = theta.shape()[3];
    let batch: usize = x.shape()[..x.ndim() - 2].iter().product();
    let pf = tm.forward.to_dense();
    let pb = tm.backward.to_dense();
    let eye: Vec<f64> = (0..n * n)
        .map(|i| if i / n == i % n { 1.0 } else { 0.0 })
        .collect();
    let matmul_sq = |a: &[f64], b: &[f64]| {
        let mut out = vec![0.0; n * n];
        crate::autodiff::ops::mm_acc(a, b, n, n, n, &mut out);
        out
    };
    let mut out_shape = x.shape().to_vec();
    *out_shape.last_mut().unwrap() = c_out;
    let mut out = vec![0.0; batch * n * c_out];
    let mut pf_k = eye.clone();
    let mut pb_k = eye;
    for k in 0..k_steps {
        for (dir, pk) in [(0usize, &pf_k), (1usize, &pb_k)] {
            let th = &theta.data()
                [(k * 2 + dir) * c_in * c_out..(k * 2 + dir + 1) * c_in * c_out];
            for b in 0..batch {
                let xb = &x.data()[b * n * c_in..(b + 1) * n * c_in];
                // pk . xb -> (n x c_in), then . th -> (n x c_out)
                let mut px = vec![0.0; n * c_in];
                crate::autodiff::ops::mm_acc(pk, xb, n, n, c_in, &mut px);
                crate::autodiff::ops::mm_acc(
                    &px,
                    th,
                    n,
                    c_in,
                    c_out,
                    &mut out[b * n * c_out..(b + 1) * n * c_out],
                );
            }
        }
        pf_k = matmul_sq(&pf_k, &pf);
        pb_k = matmul_sq(&pb_k, &pb);
    }
    Tensor::from_vec(out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check_multi, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_cycle() -> SensorGraph {
        SensorGraph::new(
            vec![(0.0, 0.0), (1.0, 0.0)],
            vec![(0, 1, 2.0), (1, 0, 2.0)],
        )
        .unwrap()
    }

    #[test]
    fn transition_of_symmetric_two_cycle() {
        let tm = build_transition_matrices(&two_cycle());
        assert_eq!(tm.forward.to_dense(), vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(tm.backward.to_dense(), vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn absorbing_node_keeps_zero_row() {
        let g = SensorGraph::new(vec![(0.0, 0.0), (1.0, 0.0)], vec![(0, 1, 1.0)]).unwrap();
        let tm = build_transition_matrices(&g);
        assert_eq!(tm.forward.to_dense(), vec![0.0, 1.0, 0.0, 0.0]);
        // Reverse direction: node 1 has in-degree 1, node 0 none.
        assert_eq!(tm.backward.to_dense(), vec![0.0, 0.0, 1.0, 0.0]);
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: usize, density: f64) -> SensorGraph {
        let coords: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0)))
            .collect();
        let mut edges = Vec::new();
        for s in 0..n {
            for d in 0..n {
                if s != d && rng.gen::<f64>() < density {
                    edges.push((s, d, rng.gen_range(0.1..3.0)));
                }
            }
        }
        SensorGraph::new(coords, edges).unwrap()
    }

    #[test]
    fn row_normalization_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = random_graph(&mut rng, 6, 0.4);
        let tm = build_transition_matrices(&g);
        let dense_w = g.weights().to_dense();
        let n = 6;
        let mut expect = vec![0.0; n * n];
        for i in 0..n {
            let row_sum: f64 = dense_w[i * n..(i + 1) * n].iter().sum();
            if row_sum > 0.0 {
                for j in 0..n {
                    expect[i * n + j] = dense_w[i * n + j] / row_sum;
                }
            }
        }
        let got = tm.forward.to_dense();
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        // Row sums are 1 or 0.
        for i in 0..n {
            let s: f64 = got[i * n..(i + 1) * n].iter().sum();
            assert!((s - 1.0).abs() < 1e-12 || s == 0.0);
        }
    }

    #[test]
    fn transition_pattern_matches_weights_pattern() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let g = random_graph(&mut rng, 8, 0.3);
        let tm = build_transition_matrices(&g);
        let w_pat: Vec<(usize, usize)> = g.weights().triples().map(|(r, c, _)| (r, c)).collect();
        let p_pat: Vec<(usize, usize)> = tm.forward.triples().map(|(r, c, _)| (r, c)).collect();
        assert_eq!(w_pat, p_pat);
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let len = shape.iter().product();
        Tensor::from_vec(
            shape.to_vec(),
            (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
        )
        .unwrap()
    }

    #[test]
    fn k1_diffusion_is_summed_identity_mix() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = two_cycle();
        let tm = build_transition_matrices(&g);
        let x = rand_tensor(&mut rng, &[2, 3]);
        let theta = rand_tensor(&mut rng, &[1, 2, 3, 3]);
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let tv = tape.leaf(theta.clone());
        let y = diffusion_convolution(xv, &tm, tv, 1).unwrap().value();
        // Oracle: X . (theta0 + theta1)
        let mut th_sum = vec![0.0; 9];
        for i in 0..9 {
            th_sum[i] = theta.data()[i] + theta.data()[9 + i];
        }
        let mut expect = vec![0.0; 6];
        crate::autodiff::ops::mm_acc(x.data(), &th_sum, 2, 3, 3, &mut expect);
        for (a, b) in y.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_theta_gives_zero_output() {
        let g = two_cycle();
        let tm = build_transition_matrices(&g);
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(vec![2, 3], 1.5));
        let theta = tape.leaf(Tensor::zeros(vec![2, 2, 3, 4]));
        let y = diffusion_convolution(x, &tm, theta, 2).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sparse_recursion_matches_dense_powers() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..6 {
            let n = rng.gen_range(3..=20);
            let k = rng.gen_range(1..=5);
            let g = random_graph(&mut rng, n, 0.25);
            let tm = build_transition_matrices(&g);
            let x = rand_tensor(&mut rng, &[n, 2]);
            let theta = rand_tensor(&mut rng, &[k, 2, 2, 3]);
            let tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let tv = tape.leaf(theta.clone());
            let fast = diffusion_convolution(xv, &tm, tv, k).unwrap().value();
            let slow = diffusion_dense_oracle(&x, &tm, &theta, k).unwrap();
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-10, "sparse {a} vs dense {b}");
            }
        }
    }

    #[test]
    fn output_linear_in_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_graph(&mut rng, 6, 0.4);
        let tm = build_transition_matrices(&g);
        let x = rand_tensor(&mut rng, &[6, 2]);
        let theta = rand_tensor(&mut rng, &[3, 2, 2, 2]);
        let run = |scale: f64| {
            let tape = Tape::new();
            let mut xs = x.clone();
            for v in xs.data_mut() {
                *v *= scale;
            }
            let xv = tape.leaf(xs);
            let tv = tape.leaf(theta.clone());
            diffusion_convolution(xv, &tm, tv, 3).unwrap().value()
        };
        let y1 = run(1.0);
        let y3 = run(3.0);
        for (a, b) in y1.data().iter().zip(y3.data()) {
            assert!((3.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn edge_removal_is_local_beyond_k_hops() {
        // Path graph 0-1-...-9 (bidirectional), remove edge (4,5); with K=2
        // only nodes within K-1 = 1 hop of the edge endpoints can change.
        let n = 10;
        let coords: Vec<(f64, f64)> = (0..n).map(|i| (i as f64, 0.0)).collect();
        let mut edges = Vec::new();
        for i in 0..n - 1 {
            edges.push((i, i + 1, 1.0));
            edges.push((i + 1, i, 1.0));
        }
        let full = SensorGraph::new(coords.clone(), edges.clone()).unwrap();
        let cut = SensorGraph::new(
            coords,
            edges
                .into_iter()
                .filter(|&(s, d, _)| !(s == 4 && d == 5))
                .collect(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_tensor(&mut rng, &[n, 1]);
        let theta = rand_tensor(&mut rng, &[2, 2, 1, 1]);
        let run = |g: &SensorGraph| {
            let tm = build_transition_matrices(g);
            let tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let tv = tape.leaf(theta.clone());
            diffusion_convolution(xv, &tm, tv, 2).unwrap().value()
        };
        let y_full = run(&full);
        let y_cut = run(&cut);
        for i in 0..n {
            let dist = (i as i64 - 4).abs().min((i as i64 - 5).abs());
            if dist > 1 {
                assert_eq!(
                    y_full.data()[i],
                    y_cut.data()[i],
                    "node {i} beyond K-1 hops changed"
                );
            }
        }
    }

    #[test]
    fn diffusion_differentiable_in_x_and_theta() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let g = random_graph(&mut rng, 5, 0.5);
        let tm = build_transition_matrices(&g);
        let x = rand_tensor(&mut rng, &[5, 2]);
        let theta = rand_tensor(&mut rng, &[2, 2, 2, 2]);
        let tm2 = tm.clone();
        let err = grad_check_multi(
            move |_tape, vars| {
                diffusion_convolution(vars[0], &tm2, vars[1], 2)?.tanh()?.sum()
            },
            &[x, theta],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn dimension_mismatch_errors() {
        let g = two_cycle();
        let tm = build_transition_matrices(&g);
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![3, 2])); // 3 nodes vs N=2
        let theta = tape.leaf(Tensor::zeros(vec![1, 2, 2, 2]));
        assert!(diffusion_convolution(x, &tm, theta, 1).is_err());
    }

    #[test]
    fn graph_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let g = random_graph(&mut rng, 7, 0.3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.qgwgraph");
        g.save(&path).unwrap();
        let g2 = SensorGraph::load(&path).unwrap();
        assert_eq!(g.coords(), g2.coords());
        let e1: Vec<_> = g.weights().triples().collect();
        let e2: Vec<_> = g2.weights().triples().collect();
        assert_eq!(e1, e2);
    }

    #[test]
    fn graph_load_rejects_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.qgwgraph");
        std::fs::write(&path, "QGW-GRAPH v9\nN 0\n").unwrap();
        let err = SensorGraph::load(&path).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn duplicate_edges_rejected() {
        let r = SensorGraph::new(
            vec![(0.0, 0.0), (1.0, 0.0)],
            vec![(0, 1, 1.0), (0, 1, 2.0)],
        );
        assert!(r.is_err());
    }
}
