use crate::params::{block_name, head_name, OUTPUT_OFFSET, OUTPUT_SCALE};
use crate::{ModelError, ModelParams};
use pulsebp_tensorgrad::{Graph, Tensor, TensorError, Var};
use rand::RngCore;

pub const LN_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// out[n, o, t] = bias[o] + Σ_k weight[o, k]·input[n, k, t].
pub fn embed(g: &mut Graph, input: Var, weight: Var, bias: Var) -> Result<Var, ModelError> {
    Ok(g.conv1d_k1(input, weight, bias)?)
}

/// Sinusoidal table of shape [t, d_model].
pub fn positional_encoding(t: usize, d_model: usize) -> Result<Tensor, ModelError> {
    if d_model % 2 != 0 {
        return Err(ModelError::OddDimension(d_model));
    }
    let mut pe = vec![0.0; t * d_model];
    for pos in 0..t {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            pe[pos * d_model + 2 * i] = angle.sin();
            pe[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Ok(Tensor::new(vec![t, d_model], pe)?)
}

#[derive(Debug, Clone)]
pub struct AttentionVars {
    pub w_q: Vec<Var>,
    pub w_k: Vec<Var>,
    pub w_v: Vec<Var>,
    pub w_o: Var,
    pub linear_weight: Var,
    pub linear_bias: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

#[derive(Debug, Clone)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

#[derive(Debug, Clone)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
    pub offset: Var,
    pub scale: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOut {
    pub output: Var,
    /// [N, H, T, T] row-stochastic attention weights.
    pub weights: Var,
    /// Attention sub-layer output before dropout, residual and norm.
    pub pre_norm: Var,
}

/// Stacks per-head projections and splits into [N, H, T, d_head].
fn project_heads(g: &mut Graph, x: Var, ws: &[Var]) -> Result<Var, ModelError> {
    let s = g.shape(x)?.to_vec();
    let (n, t) = (s[0], s[1]);
    let dh = g.shape(ws[0])?[1];
    let w = g.concat_lastdim(ws)?;
    let p = g.matmul(x, w)?;
    let p = g.reshape(p, vec![n, t, ws.len(), dh])?;
    Ok(g.permute(p, &[0, 2, 1, 3])?)
}

pub fn multi_head_attention(
    g: &mut Graph,
    x: Var,
    p: &AttentionVars,
    keep: f64,
    rng: &mut dyn RngCore,
) -> Result<AttentionOut, ModelError> {
    let s = g.shape(x)?.to_vec();
    if s.len() != 3 || p.w_q.is_empty() || p.w_q.len() != p.w_k.len() || p.w_q.len() != p.w_v.len() {
        return Err(ModelError::ShapeMismatch(format!("attention input {s:?}")));
    }
    let (n, t) = (s[0], s[1]);
    let heads = p.w_q.len();
    let dh = g.shape(p.w_q[0])?[1];
    let q = project_heads(g, x, &p.w_q)?;
    let k = project_heads(g, x, &p.w_k)?;
    let v = project_heads(g, x, &p.w_v)?;
    // Scaling Q rather than the T×T scores is the same product, fewer flops.
    let q = g.mul_scalar(q, 1.0 / (dh as f64).sqrt())?;
    let scores = g.matmul_t(q, k)?;
    let weights = g.softmax_lastdim(scores)?;
    let ctx = g.matmul(weights, v)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, vec![n, t, heads * dh])?;
    let o = g.matmul(ctx, p.w_o)?;
    let lin = g.matmul_t(o, p.linear_weight)?;
    let pre_norm = g.add(lin, p.linear_bias)?;
    let dropped = g.dropout(pre_norm, keep, rng)?;
    let res = g.add(dropped, x)?;
    let output = g.layer_norm(res, p.ln_gain, p.ln_bias, LN_EPS)?;
    Ok(AttentionOut { output, weights, pre_norm })
}

/// relu(x·w1ᵀ + b1)·w2ᵀ + b2 per position, then dropout, residual, norm.
pub fn position_wise_ffn(g: &mut Graph, x: Var, p: &FfnVars, keep: f64, rng: &mut dyn RngCore) -> Result<Var, ModelError> {
    let h = g.matmul_t(x, p.w1)?;
    let h = g.add(h, p.b1)?;
    let h = g.relu(h)?;
    let o = g.matmul_t(h, p.w2)?;
    let o = g.add(o, p.b2)?;
    let o = g.dropout(o, keep, rng)?;
    let r = g.add(o, x)?;
    Ok(g.layer_norm(r, p.ln_gain, p.ln_bias, LN_EPS)?)
}

pub fn time_compressor(g: &mut Graph, x: Var, pool_factor: usize) -> Result<Var, ModelError> {
    g.mean_pool_time(x, pool_factor).map_err(|e| match e {
        TensorError::IndivisibleLength { len, factor } => ModelError::IndivisibleLength { len, factor },
        other => other.into(),
    })
}

/// Flatten, affine to two channels, fixed calibration, ReLU.
pub fn head(g: &mut Graph, x: Var, p: &HeadVars) -> Result<Var, ModelError> {
    let s = g.shape(x)?.to_vec();
    if s.len() != 3 {
        return Err(ModelError::ShapeMismatch(format!("head input {s:?}")));
    }
    let flat = g.reshape(x, vec![s[0], s[1] * s[2]])?;
    let z = g.matmul_t(flat, p.weight)?;
    let z = g.add(z, p.bias)?;
    let z = g.mul(z, p.scale)?;
    let z = g.add(z, p.offset)?;
    Ok(g.relu(z)?)
}

/// Parameter leaves bound on a graph, in the order of
/// [`ModelParams::tensors`].
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    pub fn new(g: &mut Graph, params: &ModelParams) -> Result<Self, ModelError> {
        let vars = params.tensors().iter().map(|t| g.leaf(t)).collect::<Result<_, _>>()?;
        Ok(Self { vars })
    }

    fn var(&self, params: &ModelParams, name: &str) -> Var {
        self.vars[params.position(name).expect("name from layout")]
    }

    pub fn attention(&self, params: &ModelParams, b: usize) -> AttentionVars {
        let heads = |w: &str| (0..params.config().n_heads).map(|h| self.var(params, &head_name(b, h, w))).collect();
        AttentionVars {
            w_q: heads("w_q"),
            w_k: heads("w_k"),
            w_v: heads("w_v"),
            w_o: self.var(params, &block_name(b, "w_o")),
            linear_weight: self.var(params, &block_name(b, "attn_linear_weight")),
            linear_bias: self.var(params, &block_name(b, "attn_linear_bias")),
            ln_gain: self.var(params, &block_name(b, "ln1_gain")),
            ln_bias: self.var(params, &block_name(b, "ln1_bias")),
        }
    }

    pub fn ffn(&self, params: &ModelParams, b: usize) -> FfnVars {
        FfnVars {
            w1: self.var(params, &block_name(b, "ffn_w1")),
            b1: self.var(params, &block_name(b, "ffn_b1")),
            w2: self.var(params, &block_name(b, "ffn_w2")),
            b2: self.var(params, &block_name(b, "ffn_b2")),
            ln_gain: self.var(params, &block_name(b, "ln2_gain")),
            ln_bias: self.var(params, &block_name(b, "ln2_bias")),
        }
    }

    pub fn head(&self, params: &ModelParams) -> HeadVars {
        HeadVars {
            weight: self.var(params, "head_weight"),
            bias: self.var(params, "head_bias"),
            offset: self.var(params, OUTPUT_OFFSET),
            scale: self.var(params, OUTPUT_SCALE),
        }
    }

    /// Adds the gradients from the last backward pass into the trainable
    /// parameter tensors.
    pub fn accumulate_grads(&self, g: &Graph, params: &mut ModelParams) -> Result<(), ModelError> {
        for (v, t) in self.vars.iter().zip(params.tensors_mut()) {
            if t.requires_grad() {
                g.accumulate_into(*v, t)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub output: Var,
    pub attention: Vec<Var>,
    pub bound: Bound,
}

/// Builds the full network on `g` for a [N, T, l_in] batch.
pub fn forward_graph(
    g: &mut Graph,
    params: &ModelParams,
    batch: &Tensor,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<ForwardPass, ModelError> {
    let cfg = params.config();
    let s = batch.shape();
    if s.len() != 3 || s[1] != cfg.t || s[2] != cfg.l_in {
        return Err(ModelError::ShapeMismatch(format!("batch {s:?}, expected [N, {}, {}]", cfg.t, cfg.l_in)));
    }
    if !batch.data().iter().all(|v| v.is_finite()) {
        return Err(ModelError::NonFinite("batch".into()));
    }
    let keep = match mode {
        Mode::Train => cfg.keep_prob(),
        Mode::Eval => 1.0,
    };
    let bound = Bound::new(g, params)?;
    let x = g.leaf(batch)?;
    let x = g.transpose(x, 1, 2)?;
    let x = embed(g, x, bound.var(params, "embed_weight"), bound.var(params, "embed_bias"))?;
    let x = g.transpose(x, 1, 2)?;
    let pe = positional_encoding(cfg.t, cfg.d_model)?;
    let pe = g.leaf(&pe)?;
    let mut x = g.add(x, pe)?;
    let mut attention = Vec::with_capacity(cfg.n_blocks);
    for b in 0..cfg.n_blocks {
        let a = multi_head_attention(g, x, &bound.attention(params, b), keep, rng)?;
        attention.push(a.weights);
        x = position_wise_ffn(g, a.output, &bound.ffn(params, b), keep, rng)?;
    }
    let x = time_compressor(g, x, cfg.pool_factor)?;
    let output = head(g, x, &bound.head(params))?;
    Ok(ForwardPass { output, attention, bound })
}

/// Forward pass returning the [N, 2] (SBP, DBP) output.
pub fn forward(params: &ModelParams, batch: &Tensor, mode: Mode, rng: &mut dyn RngCore) -> Result<Tensor, ModelError> {
    let mut g = Graph::new();
    let f = forward_graph(&mut g, params, batch, mode, rng)?;
    Ok(g.to_tensor(f.output)?)
}

/// Eval-mode predictions in chunks of `chunk` samples.
pub fn predict(params: &ModelParams, batch: &Tensor, chunk: usize) -> Result<Vec<[f64; 2]>, ModelError> {
    let s = batch.shape();
    let per: usize = s[1..].iter().product();
    let mut out = Vec::with_capacity(s[0]);
    let mut unused = NoRng;
    for rows in batch.data().chunks(chunk.max(1) * per) {
        let n = rows.len() / per;
        let mut shape = s.to_vec();
        shape[0] = n;
        let part = Tensor::new(shape, rows.to_vec())?;
        let y = forward(params, &part, Mode::Eval, &mut unused)?;
        out.extend(y.data().chunks_exact(2).map(|c| [c[0], c[1]]));
    }
    Ok(out)
}

/// Eval mode never draws; this makes that explicit.
struct NoRng;

impl RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("eval-mode forward drew a random number")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("eval-mode forward drew a random number")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("eval-mode forward drew a random number")
    }
}
