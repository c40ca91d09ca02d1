use crate::{ModelConfig, ModelError};
use pulsebp_tensorgrad::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Glorot uniform with the given fan-in and fan-out.
    Glorot(usize, usize),
    Zeros,
    Ones,
}

struct Slot {
    name: String,
    shape: Vec<usize>,
    init: Init,
    trainable: bool,
}

pub(crate) fn block_name(b: usize, what: &str) -> String {
    format!("block{b}.{what}")
}

pub(crate) fn head_name(b: usize, h: usize, what: &str) -> String {
    format!("block{b}.head{h}.{what}")
}

pub const OUTPUT_OFFSET: &str = "output_offset";
pub const OUTPUT_SCALE: &str = "output_scale";

fn layout(cfg: &ModelConfig) -> Vec<Slot> {
    let (d, dh, h, ff) = (cfg.d_model, cfg.d_head, cfg.n_heads, cfg.d_ff);
    let mut s = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| s.push(Slot { name, shape, init, trainable: true });
    add("embed_weight".into(), vec![d, cfg.l_in], Init::Glorot(cfg.l_in, d));
    add("embed_bias".into(), vec![d], Init::Zeros);
    for b in 0..cfg.n_blocks {
        for hh in 0..h {
            for w in ["w_q", "w_k", "w_v"] {
                add(head_name(b, hh, w), vec![d, dh], Init::Glorot(d, dh));
            }
        }
        add(block_name(b, "w_o"), vec![h * dh, d], Init::Glorot(h * dh, d));
        add(block_name(b, "attn_linear_weight"), vec![d, d], Init::Glorot(d, d));
        add(block_name(b, "attn_linear_bias"), vec![d], Init::Zeros);
        add(block_name(b, "ln1_gain"), vec![d], Init::Ones);
        add(block_name(b, "ln1_bias"), vec![d], Init::Zeros);
        add(block_name(b, "ffn_w1"), vec![ff, d], Init::Glorot(d, ff));
        add(block_name(b, "ffn_b1"), vec![ff], Init::Zeros);
        add(block_name(b, "ffn_w2"), vec![d, ff], Init::Glorot(ff, d));
        add(block_name(b, "ffn_b2"), vec![d], Init::Zeros);
        add(block_name(b, "ln2_gain"), vec![d], Init::Ones);
        add(block_name(b, "ln2_bias"), vec![d], Init::Zeros);
    }
    let flat = d * cfg.pooled_len();
    add("head_weight".into(), vec![2, flat], Init::Glorot(flat, 2));
    add("head_bias".into(), vec![2], Init::Zeros);
    s.push(Slot { name: OUTPUT_OFFSET.into(), shape: vec![2], init: Init::Zeros, trainable: false });
    s.push(Slot { name: OUTPUT_SCALE.into(), shape: vec![2], init: Init::Ones, trainable: false });
    s
}

/// Named parameter tensors in declaration order. The last two entries are a
/// fixed per-channel output calibration (offset, scale) applied before the
/// final ReLU; they are identity by default and never trained.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, unit layer-norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut named = Vec::new();
        for slot in layout(config) {
            let n: usize = slot.shape.iter().product();
            let data = match slot.init {
                Init::Glorot(fi, fo) => {
                    let a = (6.0 / (fi + fo) as f64).sqrt();
                    (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * a).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            named.push((slot.name, Tensor::new(slot.shape, data)?));
        }
        Self::from_named(config.clone(), named)
    }

    /// Checks names and shapes against the layout implied by `config`.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        config.validate()?;
        let slots = layout(&config);
        if slots.len() != named.len() {
            return Err(ModelError::ShapeMismatch(format!("expected {} tensors, got {}", slots.len(), named.len())));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for (slot, (name, mut t)) in slots.into_iter().zip(named) {
            if slot.name != name || slot.shape != t.shape() {
                return Err(ModelError::ShapeMismatch(format!(
                    "expected {} {:?}, got {} {:?}",
                    slot.name,
                    slot.shape,
                    name,
                    t.shape()
                )));
            }
            if !t.data().iter().all(|v| v.is_finite()) {
                return Err(ModelError::NonFinite(name));
            }
            t.set_requires_grad(slot.trainable);
            names.push(name);
            tensors.push(t);
        }
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Self { config, names, tensors, index })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors.iter().filter(|t| t.requires_grad()).map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn output_calibration(&self) -> ([f64; 2], [f64; 2]) {
        let o = self.get(OUTPUT_OFFSET).expect("layout").data();
        let s = self.get(OUTPUT_SCALE).expect("layout").data();
        ([o[0], o[1]], [s[0], s[1]])
    }

    pub fn set_output_calibration(&mut self, offset: [f64; 2], scale: [f64; 2]) -> Result<(), ModelError> {
        if !offset.iter().chain(&scale).all(|v| v.is_finite()) || scale.iter().any(|s| *s <= 0.0) {
            return Err(ModelError::InvalidConfig(format!("calibration offset {offset:?}, scale {scale:?}")));
        }
        self.get_mut(OUTPUT_OFFSET).expect("layout").data_mut().copy_from_slice(&offset);
        self.get_mut(OUTPUT_SCALE).expect("layout").data_mut().copy_from_slice(&scale);
        Ok(())
    }
}
