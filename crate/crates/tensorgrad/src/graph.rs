use crate::gemm::gemm;
use crate::pool;
use crate::tensor::{shape_err, Result, Tensor, TensorError};
use rand::Rng;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, tb: bool, shared: bool, batch: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    MulScalar { a: usize, s: f64 },
    Relu { a: usize },
    Softmax { a: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout { a: usize, mask: Vec<f64> },
    MeanPoolTime { a: usize, factor: usize },
    Reshape { a: usize },
    Permute { a: usize, axes: Vec<usize> },
    Concat { parts: Vec<usize> },
    Conv1dK1 { x: usize, w: usize, b: usize },
    Mse { pred: usize, target: usize },
    Sum { a: usize },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Append-only tape. Build the forward pass with the op methods, then call
/// [`Graph::backward`] on a scalar node.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Drop for Graph {
    fn drop(&mut self) {
        for node in self.nodes.drain(..) {
            pool::give(node.value);
            match node.op {
                Op::LayerNorm { xhat, inv_std, .. } => {
                    pool::give(xhat);
                    pool::give(inv_std);
                }
                Op::Dropout { mask, .. } => pool::give(mask),
                _ => {}
            }
        }
        for g in self.grads.drain(..).flatten() {
            pool::give(g);
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Output shape, contiguous run length, and the source offset of every run
/// in output order. Runs are longer than one element when the last axis is
/// left in place.
fn permute_plan(in_shape: &[usize], axes: &[usize]) -> (Vec<usize>, usize, Vec<usize>) {
    let nd = in_shape.len();
    if nd > 0 && axes[nd - 1] == nd - 1 {
        let run = in_shape[nd - 1];
        let outer: Vec<usize> = in_shape[..nd - 1].to_vec();
        let (_, offs) = permute_offsets(&outer, &axes[..nd - 1]);
        let shape = axes.iter().map(|&a| in_shape[a]).collect();
        return (shape, run, offs.into_iter().map(|o| o * run).collect());
    }
    let (shape, offs) = permute_offsets(in_shape, axes);
    (shape, 1, offs)
}

fn permute_offsets(in_shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut in_strides = vec![1usize; in_shape.len()];
    for i in (0..in_shape.len().saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    // Source offset for every output element, in output order.
    let total: usize = in_shape.iter().product();
    let mut offs = Vec::with_capacity(total);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..total {
        offs.push(off);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, offs)
}

impl Graph {
    pub fn new() -> Self {
        Self { id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.index)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        Ok(&self.nodes[self.idx(v)?])
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if !pool::all_finite(&value) {
            return Err(TensorError::NonFiniteDetected { op: op_name });
        }
        self.nodes.push(Node { shape, value, op, needs_grad });
        Ok(Var { graph: self.id, index: self.nodes.len() - 1 })
    }

    /// Leaf copied from `t`; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.push("leaf", t.shape().to_vec(), pool::copy(t.data()), Op::Leaf, t.requires_grad())
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.contains(&0) {
            return Err(shape_err("constant", format!("shape {shape:?} with {} values", data.len())));
        }
        self.push("constant", shape, data, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Result<&[f64]> {
        Ok(&self.node(v)?.value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(&self.node(v)?.shape)
    }

    pub fn to_tensor(&self, v: Var) -> Result<Tensor> {
        let n = self.node(v)?;
        Tensor::new(n.shape.clone(), n.value.clone())
    }

    /// Gradient of a leaf after the last [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        let i = self.idx(v).ok()?;
        self.grads.get(i)?.as_deref()
    }

    /// Adds the gradient of leaf `v` into `t.grad`.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        let i = self.idx(v)?;
        match self.grads.get(i).and_then(|g| g.as_deref()) {
            Some(g) => t.accumulate_grad(g),
            None => Err(TensorError::MissingGradient { index: i }),
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    // ---- ops ----

    /// a: [..., M, K] times b: [K, N] (shared) or [..., K, N] (batched).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// a: [..., M, K] times bᵀ where b is [N, K] (shared) or [..., N, K].
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (&self.nodes[ai].shape, &self.nodes[bi].shape);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if tb { (sb[sb.len() - 1], sb[sb.len() - 2]) } else { (sb[sb.len() - 2], sb[sb.len() - 1]) };
        let lead = &sa[..sa.len() - 2];
        let shared = sb.len() == 2;
        if kb != k || (!shared && &sb[..sb.len() - 2] != lead) {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?} (transposed: {tb})")));
        }
        let batch: usize = lead.iter().product();
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let mut out = pool::zeroed(batch * m * n);
        if shared {
            gemm(batch * m, k, n, av, false, bv, tb, 0.0, &mut out);
        } else {
            for p in 0..batch {
                gemm(m, k, n, &av[p * m * k..(p + 1) * m * k], false, &bv[p * k * n..(p + 1) * k * n], tb, 0.0, &mut out[p * m * n..(p + 1) * m * n]);
            }
        }
        let ng = self.needs(&[ai, bi]);
        self.push("matmul", shape, out, Op::MatMul { a: ai, b: bi, tb, shared, batch, m, k, n }, ng)
    }

    fn broadcast_check(&self, op: &'static str, ai: usize, bi: usize) -> Result<usize> {
        let (sa, sb) = (&self.nodes[ai].shape, &self.nodes[bi].shape);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(shape_err(op, format!("{sb:?} is not a suffix of {sa:?}")));
        }
        Ok(self.nodes[bi].value.len())
    }

    /// Element-wise a + b, where b's shape is a suffix of a's shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let nb = self.broadcast_check("add", ai, bi)?;
        let bv = &self.nodes[bi].value;
        let mut out = pool::copy(&self.nodes[ai].value);
        out.chunks_exact_mut(nb).for_each(|c| add_into(c, bv));
        let ng = self.needs(&[ai, bi]);
        self.push("add", self.nodes[ai].shape.clone(), out, Op::Add { a: ai, b: bi }, ng)
    }

    /// Element-wise a ⊙ b with the same suffix broadcasting as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let nb = self.broadcast_check("mul", ai, bi)?;
        let bv = &self.nodes[bi].value;
        let mut out = pool::copy(&self.nodes[ai].value);
        out.chunks_exact_mut(nb).for_each(|c| c.iter_mut().zip(bv).for_each(|(x, y)| *x *= y));
        let ng = self.needs(&[ai, bi]);
        self.push("mul", self.nodes[ai].shape.clone(), out, Op::Mul { a: ai, b: bi }, ng)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let ai = self.idx(a)?;
        let xv = &self.nodes[ai].value;
        let mut out = pool::empty(xv.len());
        out.extend(xv.iter().map(|x| x * s));
        let ng = self.needs(&[ai]);
        self.push("mul_scalar", self.nodes[ai].shape.clone(), out, Op::MulScalar { a: ai, s }, ng)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let xv = &self.nodes[ai].value;
        let mut out = pool::empty(xv.len());
        out.extend(xv.iter().map(|&x| if x > 0.0 { x } else { 0.0 }));
        let ng = self.needs(&[ai]);
        self.push("relu", self.nodes[ai].shape.clone(), out, Op::Relu { a: ai }, ng)
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let d = last_dim(&self.nodes[ai].shape);
        let mut out = pool::copy(&self.nodes[ai].value);
        for row in out.chunks_exact_mut(d) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let ng = self.needs(&[ai]);
        self.push("softmax_lastdim", self.nodes[ai].shape.clone(), out, Op::Softmax { a: ai }, ng)
    }

    /// Normalizes each last-dim row to zero mean and unit (population)
    /// variance, then applies gain `gamma` and bias `beta` (both length D).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let d = last_dim(&self.nodes[xi].shape);
        if self.nodes[gi].shape != [d] || self.nodes[bi].shape != [d] {
            return Err(shape_err("layer_norm", format!("gain/bias must be [{d}]")));
        }
        let (g, b) = (&self.nodes[gi].value, &self.nodes[bi].value);
        let xv = &self.nodes[xi].value;
        let rows = xv.len() / d;
        let mut xhat = pool::zeroed(xv.len());
        let mut inv_std = pool::zeroed(rows);
        let mut out = pool::zeroed(xv.len());
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let ng = self.needs(&[xi, gi, bi]);
        let shape = self.nodes[xi].shape.clone();
        self.push("layer_norm", shape, out, Op::LayerNorm { x: xi, gamma: gi, beta: bi, xhat, inv_std }, ng)
    }

    /// Inverted dropout. `keep` = 1 returns `a` unchanged without drawing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, keep: f64, rng: &mut R) -> Result<Var> {
        let ai = self.idx(a)?;
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(TensorError::InvalidArgument(format!("keep probability {keep} outside (0, 1]")));
        }
        if keep == 1.0 {
            return Ok(a);
        }
        let scale = 1.0 / keep;
        let xv = &self.nodes[ai].value;
        let mut mask = pool::empty(xv.len());
        mask.extend((0..xv.len()).map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 }));
        let mut out = pool::empty(xv.len());
        out.extend(xv.iter().zip(&mask).map(|(x, m)| x * m));
        let ng = self.needs(&[ai]);
        self.push("dropout", self.nodes[ai].shape.clone(), out, Op::Dropout { a: ai, mask }, ng)
    }

    /// Average pooling of [N, T, D] over consecutive groups of `factor` steps.
    pub fn mean_pool_time(&mut self, a: Var, factor: usize) -> Result<Var> {
        let ai = self.idx(a)?;
        let s = &self.nodes[ai].shape;
        if s.len() != 3 {
            return Err(shape_err("mean_pool_time", format!("expected [N, T, D], got {s:?}")));
        }
        let (n, t, d) = (s[0], s[1], s[2]);
        if factor == 0 || t % factor != 0 {
            return Err(TensorError::IndivisibleLength { len: t, factor });
        }
        let to = t / factor;
        let xv = &self.nodes[ai].value;
        let mut out = pool::zeroed(n * to * d);
        for b in 0..n {
            for j in 0..to {
                let dst = &mut out[(b * to + j) * d..(b * to + j + 1) * d];
                for q in 0..factor {
                    let src = &xv[(b * t + j * factor + q) * d..][..d];
                    add_into(dst, src);
                }
                dst.iter_mut().for_each(|v| *v /= factor as f64);
            }
        }
        let ng = self.needs(&[ai]);
        self.push("mean_pool_time", vec![n, to, d], out, Op::MeanPoolTime { a: ai, factor }, ng)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ai = self.idx(a)?;
        let n: usize = shape.iter().product();
        if n != self.nodes[ai].value.len() || shape.contains(&0) {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.nodes[ai].shape)));
        }
        let ng = self.needs(&[ai]);
        self.push("reshape", shape, pool::copy(&self.nodes[ai].value), Op::Reshape { a: ai }, ng)
    }

    /// General axis permutation; output axis i is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let ai = self.idx(a)?;
        let s = &self.nodes[ai].shape;
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&x| x >= s.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(shape_err("permute", format!("axes {axes:?} for {s:?}")));
        }
        let (shape, run, offs) = permute_plan(s, axes);
        let xv = &self.nodes[ai].value;
        let mut out = pool::empty(xv.len());
        offs.iter().for_each(|&o| out.extend_from_slice(&xv[o..o + run]));
        let ng = self.needs(&[ai]);
        self.push("permute", shape, out, Op::Permute { a: ai, axes: axes.to_vec() }, ng)
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let nd = self.shape(a)?.len();
        if d0 >= nd || d1 >= nd {
            return Err(shape_err("transpose", format!("axes ({d0}, {d1}) for rank {nd}")));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(d0, d1);
        self.permute(a, &axes)
    }

    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let first = ids.first().ok_or_else(|| shape_err("concat_lastdim", "no inputs"))?;
        let lead = &self.nodes[*first].shape[..self.nodes[*first].shape.len() - 1];
        let mut width = 0;
        for &i in &ids {
            let s = &self.nodes[i].shape;
            if &s[..s.len() - 1] != lead {
                return Err(shape_err("concat_lastdim", format!("{s:?} vs leading {lead:?}")));
            }
            width += last_dim(s);
        }
        let rows: usize = lead.iter().product();
        let mut out = pool::empty(rows * width);
        for r in 0..rows {
            for &i in &ids {
                let d = last_dim(&self.nodes[i].shape);
                out.extend_from_slice(&self.nodes[i].value[r * d..(r + 1) * d]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(width);
        let ng = self.needs(&ids);
        self.push("concat_lastdim", shape, out, Op::Concat { parts: ids }, ng)
    }

    /// Kernel-size-1 convolution: x [N, Cin, T], w [Cout, Cin], b [Cout]
    /// gives out[n, o, t] = b[o] + Σ_k w[o, k]·x[n, k, t].
    pub fn conv1d_k1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let (sx, sw, sb) = (&self.nodes[xi].shape, &self.nodes[wi].shape, &self.nodes[bi].shape);
        if sx.len() != 3 || sw.len() != 2 || sw[1] != sx[1] || sb[..] != [sw[0]] {
            return Err(shape_err("conv1d_k1", format!("x {sx:?}, w {sw:?}, b {sb:?}")));
        }
        let (n, cin, t, cout) = (sx[0], sx[1], sx[2], sw[0]);
        let (xv, wv, bv) = (&self.nodes[xi].value, &self.nodes[wi].value, &self.nodes[bi].value);
        let mut out = pool::zeroed(n * cout * t);
        for s in 0..n {
            let o = &mut out[s * cout * t..(s + 1) * cout * t];
            for (row, bias) in o.chunks_exact_mut(t).zip(bv) {
                row.fill(*bias);
            }
            gemm(cout, cin, t, wv, false, &xv[s * cin * t..(s + 1) * cin * t], false, 1.0, o);
        }
        let ng = self.needs(&[xi, wi, bi]);
        self.push("conv1d_k1", vec![n, cout, t], out, Op::Conv1dK1 { x: xi, w: wi, b: bi }, ng)
    }

    /// Mean over all elements of (pred − target)².
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (pi, ti) = (self.idx(pred)?, self.idx(target)?);
        if self.nodes[pi].shape != self.nodes[ti].shape {
            return Err(shape_err("mse_loss", format!("{:?} vs {:?}", self.nodes[pi].shape, self.nodes[ti].shape)));
        }
        let (p, t) = (&self.nodes[pi].value, &self.nodes[ti].value);
        let v = p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64;
        let ng = self.needs(&[pi, ti]);
        self.push("mse_loss", vec![1], vec![v], Op::Mse { pred: pi, target: ti }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let v = self.nodes[ai].value.iter().sum();
        let ng = self.needs(&[ai]);
        self.push("sum", vec![1], vec![v], Op::Sum { a: ai }, ng)
    }

    // ---- reverse mode ----

    /// Computes d(loss)/d(leaf) for every differentiable leaf reachable from
    /// `loss`. Each call replaces the previously stored gradients; use
    /// [`Graph::accumulate_into`] to sum them into parameters.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(shape_err("backward", format!("loss must be scalar, got {:?}", self.nodes[li].shape)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if !pool::all_finite(&g) {
                return Err(TensorError::NonFiniteGradient { node: i });
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
            pool::give(g);
        }
        for old in std::mem::replace(&mut self.grads, grads).into_iter().flatten() {
            pool::give(old);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let check = |p: usize| -> Result<bool> {
            if p >= i {
                return Err(TensorError::GraphCycle { node: i, parent: p });
            }
            Ok(nodes[p].needs_grad)
        };
        fn buf<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], p: usize) -> &'a mut Vec<f64> {
            grads[p].get_or_insert_with(|| pool::zeroed(nodes[p].value.len()))
        }
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, tb, shared, batch, m, k, n } => {
                let (av, bv) = (&nodes[a].value, &nodes[b].value);
                if check(a)? {
                    let da = buf(grads, nodes, a);
                    if shared {
                        gemm(batch * m, n, k, g, false, bv, !tb, 1.0, da);
                    } else {
                        for p in 0..batch {
                            let (gs, bs) = (&g[p * m * n..][..m * n], &bv[p * k * n..][..k * n]);
                            gemm(m, n, k, gs, false, bs, !tb, 1.0, &mut da[p * m * k..][..m * k]);
                        }
                    }
                }
                if check(b)? {
                    let db = buf(grads, nodes, b);
                    let (rows, per_a, per_g, per_b, count) =
                        if shared { (batch * m, 0, 0, 0, 1) } else { (m, m * k, m * n, k * n, batch) };
                    for p in 0..count {
                        let asl = &av[p * per_a..][..rows * k];
                        let gsl = &g[p * per_g..][..rows * n];
                        let dsl = &mut db[p * per_b..][..k * n];
                        if tb {
                            gemm(n, rows, k, gsl, true, asl, false, 1.0, dsl);
                        } else {
                            gemm(k, rows, n, asl, true, gsl, false, 1.0, dsl);
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                if check(a)? {
                    add_into(buf(grads, nodes, a), g);
                }
                if check(b)? {
                    let db = buf(grads, nodes, b);
                    for chunk in g.chunks_exact(db.len()) {
                        add_into(db, chunk);
                    }
                }
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (&nodes[a].value, &nodes[b].value);
                let nb = bv.len();
                if check(a)? {
                    let da = buf(grads, nodes, a);
                    for (dc, gc) in da.chunks_exact_mut(nb).zip(g.chunks_exact(nb)) {
                        dc.iter_mut().zip(gc).zip(bv).for_each(|((d, gv), y)| *d += gv * y);
                    }
                }
                if check(b)? {
                    let db = buf(grads, nodes, b);
                    for (gc, ac) in g.chunks_exact(nb).zip(av.chunks_exact(nb)) {
                        db.iter_mut().zip(gc).zip(ac).for_each(|((d, gv), x)| *d += gv * x);
                    }
                }
            }
            &Op::MulScalar { a, s } => {
                if check(a)? {
                    buf(grads, nodes, a).iter_mut().zip(g).for_each(|(d, gv)| *d += gv * s);
                }
            }
            &Op::Relu { a } => {
                if check(a)? {
                    let av = &nodes[a].value;
                    let da = buf(grads, nodes, a);
                    for j in 0..g.len() {
                        if av[j] > 0.0 {
                            da[j] += g[j];
                        }
                    }
                }
            }
            &Op::Softmax { a } => {
                if check(a)? {
                    let y = &nodes[i].value;
                    let d = last_dim(&nodes[i].shape);
                    let da = buf(grads, nodes, a);
                    for ((yr, gr), dr) in y.chunks_exact(d).zip(g.chunks_exact(d)).zip(da.chunks_exact_mut(d)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..d {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let d = last_dim(&nodes[i].shape);
                if check(gamma)? {
                    let dg = buf(grads, nodes, gamma);
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if check(beta)? {
                    let db = buf(grads, nodes, beta);
                    for gr in g.chunks_exact(d) {
                        add_into(db, gr);
                    }
                }
                if check(x)? {
                    let gv = &nodes[gamma].value;
                    let dx = buf(grads, nodes, x);
                    let mut dh = vec![0.0; d];
                    for (r, inv) in inv_std.iter().enumerate() {
                        let (gr, hr) = (&g[r * d..][..d], &xhat[r * d..][..d]);
                        for j in 0..d {
                            dh[j] = gr[j] * gv[j];
                        }
                        let s1: f64 = dh.iter().sum::<f64>() / d as f64;
                        let s2: f64 = dh.iter().zip(hr).map(|(p, q)| p * q).sum::<f64>() / d as f64;
                        let dr = &mut dx[r * d..][..d];
                        for j in 0..d {
                            dr[j] += inv * (dh[j] - s1 - hr[j] * s2);
                        }
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if check(*a)? {
                    let da = buf(grads, nodes, *a);
                    for j in 0..g.len() {
                        da[j] += g[j] * mask[j];
                    }
                }
            }
            &Op::MeanPoolTime { a, factor } => {
                if check(a)? {
                    let s = &nodes[a].shape;
                    let (n, t, d) = (s[0], s[1], s[2]);
                    let to = t / factor;
                    let da = buf(grads, nodes, a);
                    let w = 1.0 / factor as f64;
                    for b in 0..n {
                        for j in 0..to {
                            let src = &g[(b * to + j) * d..][..d];
                            for q in 0..factor {
                                let dst = &mut da[(b * t + j * factor + q) * d..][..d];
                                dst.iter_mut().zip(src).for_each(|(x, y)| *x += y * w);
                            }
                        }
                    }
                }
            }
            &Op::Reshape { a } => {
                if check(a)? {
                    add_into(buf(grads, nodes, a), g);
                }
            }
            Op::Permute { a, axes } => {
                if check(*a)? {
                    let (_, run, offs) = permute_plan(&nodes[*a].shape, axes);
                    let da = buf(grads, nodes, *a);
                    for (gc, &o) in g.chunks_exact(run).zip(&offs) {
                        add_into(&mut da[o..o + run], gc);
                    }
                }
            }
            Op::Concat { parts } => {
                let width = last_dim(&nodes[i].shape);
                let rows = g.len() / width;
                let mut col = 0;
                for &p in parts {
                    let d = last_dim(&nodes[p].shape);
                    if check(p)? {
                        let dp = buf(grads, nodes, p);
                        for r in 0..rows {
                            add_into(&mut dp[r * d..][..d], &g[r * width + col..][..d]);
                        }
                    }
                    col += d;
                }
            }
            &Op::Conv1dK1 { x, w, b } => {
                let s = &nodes[x].shape;
                let (n, cin, t) = (s[0], s[1], s[2]);
                let cout = nodes[w].shape[0];
                let (xv, wv) = (&nodes[x].value, &nodes[w].value);
                if check(w)? {
                    let dw = buf(grads, nodes, w);
                    for s in 0..n {
                        gemm(cout, t, cin, &g[s * cout * t..][..cout * t], false, &xv[s * cin * t..][..cin * t], true, 1.0, dw);
                    }
                }
                if check(b)? {
                    let db = buf(grads, nodes, b);
                    for (j, row) in g.chunks_exact(t).enumerate() {
                        db[j % cout] += row.iter().sum::<f64>();
                    }
                }
                if check(x)? {
                    let dx = buf(grads, nodes, x);
                    for s in 0..n {
                        gemm(cin, cout, t, wv, true, &g[s * cout * t..][..cout * t], false, 1.0, &mut dx[s * cin * t..][..cin * t]);
                    }
                }
            }
            &Op::Mse { pred, target } => {
                let (p, t) = (&nodes[pred].value, &nodes[target].value);
                let c = 2.0 * g[0] / p.len() as f64;
                if check(pred)? {
                    let dp = buf(grads, nodes, pred);
                    for j in 0..p.len() {
                        dp[j] += c * (p[j] - t[j]);
                    }
                }
                if check(target)? {
                    let dt = buf(grads, nodes, target);
                    for j in 0..p.len() {
                        dt[j] -= c * (p[j] - t[j]);
                    }
                }
            }
            &Op::Sum { a } => {
                if check(a)? {
                    buf(grads, nodes, a).iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
        Ok(())
    }
}
