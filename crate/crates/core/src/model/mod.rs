//! Small decoder-only transformer: learned absolute positions, pre-norm blocks
//! with causal multi-head self-attention and a GELU feed-forward, final layer
//! norm and an untied output projection.
//!
//! Gradients are derived by hand in [`backward`] and checked against central
//! finite differences in the tests.

mod backward;
mod checkpoint;
mod infer;
pub(crate) mod ops;
mod saliency;

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;

pub use backward::{batch_loss, loss_and_grads, Dropout, LossAndGrads};
pub use checkpoint::{read_checkpoint_header, AnyCheckpoint, Checkpoint, CheckpointHeader};
pub use infer::{forward, forward_cached, KvCache};
pub use saliency::saliency_scores;

pub(crate) use backward::{backward_pass, forward_pass};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("position {position} is out of range for a sequence of {len} tokens")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint holds {found} parameters but {expected} was requested")]
    DTypeMismatch {
        found: &'static str,
        expected: &'static str,
    },
    #[error("non-finite value in tensor `{0}`")]
    NonFinite(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    /// Applied to the embedding output and both residual branches during training.
    pub dropout: f64,
}

impl ModelConfig {
    /// 4 layers, 4 heads, width 128, feed-forward 512, 256 positions, no dropout.
    pub fn desk_default(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            max_seq_len: 256,
            vocab_size,
            dropout: 0.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!(
                    "{name} must be positive"
                )));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig(format!(
                "dropout {} is not in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Number of trainable scalars:
    ///
    /// `2·V·d + L·d + n_layers·(4·d² + 2·d·f + 9·d + f) + 2·d`
    ///
    /// (token embedding and output projection, positions, per block two layer
    /// norms, fused QKV, attention output, two feed-forward layers, and the
    /// final layer norm).
    pub fn parameter_count(&self) -> usize {
        let (v, d, f, l) = (self.vocab_size, self.d_model, self.d_ff, self.max_seq_len);
        2 * v * d + l * d + self.n_layers * (4 * d * d + 2 * d * f + 9 * d + f) + 2 * d
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "layers={} heads={} d_model={} d_ff={} max_seq_len={} vocab={} dropout={}",
            self.n_layers,
            self.n_heads,
            self.d_model,
            self.d_ff,
            self.max_seq_len,
            self.vocab_size,
            self.dropout
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Tensor indices of one transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct BlockSlots {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_attn_out: usize,
    pub b_attn_out: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_fc: usize,
    pub b_fc: usize,
    pub w_mlp_out: usize,
    pub b_mlp_out: usize,
}

/// Names, shapes and offsets of every parameter tensor in one flat buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    tensors: Vec<TensorInfo>,
    by_name: HashMap<String, usize>,
    pub(crate) wte: usize,
    pub(crate) wpe: usize,
    pub(crate) blocks: Vec<BlockSlots>,
    pub(crate) lnf_g: usize,
    pub(crate) lnf_b: usize,
    pub(crate) lm_head: usize,
    total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.d_ff);
        let mut layout = ParamLayout {
            tensors: Vec::new(),
            by_name: HashMap::new(),
            wte: 0,
            wpe: 0,
            blocks: Vec::new(),
            lnf_g: 0,
            lnf_b: 0,
            lm_head: 0,
            total: 0,
        };
        layout.wte = layout.push("wte", &[v, d]);
        layout.wpe = layout.push("wpe", &[cfg.max_seq_len, d]);
        for i in 0..cfg.n_layers {
            let p = format!("h{i}");
            let block = BlockSlots {
                ln1_g: layout.push(&format!("{p}.ln1.g"), &[d]),
                ln1_b: layout.push(&format!("{p}.ln1.b"), &[d]),
                w_qkv: layout.push(&format!("{p}.attn.w_qkv"), &[d, 3 * d]),
                b_qkv: layout.push(&format!("{p}.attn.b_qkv"), &[3 * d]),
                w_attn_out: layout.push(&format!("{p}.attn.w_out"), &[d, d]),
                b_attn_out: layout.push(&format!("{p}.attn.b_out"), &[d]),
                ln2_g: layout.push(&format!("{p}.ln2.g"), &[d]),
                ln2_b: layout.push(&format!("{p}.ln2.b"), &[d]),
                w_fc: layout.push(&format!("{p}.mlp.w_fc"), &[d, f]),
                b_fc: layout.push(&format!("{p}.mlp.b_fc"), &[f]),
                w_mlp_out: layout.push(&format!("{p}.mlp.w_out"), &[f, d]),
                b_mlp_out: layout.push(&format!("{p}.mlp.b_out"), &[d]),
            };
            layout.blocks.push(block);
        }
        layout.lnf_g = layout.push("ln_f.g", &[d]);
        layout.lnf_b = layout.push("ln_f.b", &[d]);
        layout.lm_head = layout.push("lm_head", &[d, v]);
        layout
    }

    fn push(&mut self, name: &str, shape: &[usize]) -> usize {
        let len = shape.iter().product();
        let index = self.tensors.len();
        self.tensors.push(TensorInfo {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset: self.total,
            len,
        });
        self.by_name.insert(name.to_string(), index);
        self.total += len;
        index
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Name of the tensor that owns flat index `i`.
    pub fn owner(&self, i: usize) -> &str {
        let t = self.tensors.partition_point(|t| t.offset + t.len <= i);
        &self.tensors[t].name
    }
}

/// Flat parameter (or gradient) buffer with a named layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<S> {
    layout: Arc<ParamLayout>,
    data: Vec<S>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let data = vec![S::zero(); layout.total()];
        ParamSet { layout, data }
    }

    pub fn zeros_like(other: &ParamSet<S>) -> Self {
        Self::zeros(other.layout.clone())
    }

    pub(crate) fn from_data(layout: Arc<ParamLayout>, data: Vec<S>) -> Self {
        assert_eq!(layout.total(), data.len());
        ParamSet { layout, data }
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn tensor(&self, index: usize) -> &[S] {
        let t = &self.layout.tensors[index];
        &self.data[t.offset..t.offset + t.len]
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut [S] {
        let t = &self.layout.tensors[index];
        &mut self.data[t.offset..t.offset + t.len]
    }

    pub fn get(&self, name: &str) -> Option<&[S]> {
        self.layout.index_of(name).map(|i| self.tensor(i))
    }

    /// First tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.layout
            .tensors
            .iter()
            .find(|t| {
                self.data[t.offset..t.offset + t.len]
                    .iter()
                    .any(|x| !x.is_finite())
            })
            .map(|t| t.name.as_str())
    }

    pub fn convert<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            layout: self.layout.clone(),
            data: self.data.iter().map(|&x| T::lit(x.as_f64())).collect(),
        }
    }
}

/// Scaled-normal initialization: weights and embeddings `N(0, 0.02²)`, residual
/// output projections additionally scaled by `1/√(2·n_layers)`, biases zero,
/// layer-norm gains one.
pub fn init_params<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamSet<S>, ModelError> {
    cfg.validate()?;
    let layout = Arc::new(ParamLayout::new(cfg));
    let mut params = ParamSet::zeros(layout.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |std: f64| Normal::new(0.0, std).expect("positive std");
    let residual_std = INIT_STD / (2.0 * cfg.n_layers as f64).sqrt();

    let mut fill = |params: &mut ParamSet<S>, index: usize, std: f64| {
        let dist = normal(std);
        for x in params.tensor_mut(index) {
            *x = S::lit(dist.sample(&mut rng));
        }
    };
    fill(&mut params, layout.wte, INIT_STD);
    fill(&mut params, layout.wpe, INIT_STD);
    for b in &layout.blocks {
        fill(&mut params, b.w_qkv, INIT_STD);
        fill(&mut params, b.w_attn_out, residual_std);
        fill(&mut params, b.w_fc, INIT_STD);
        fill(&mut params, b.w_mlp_out, residual_std);
        for g in [b.ln1_g, b.ln2_g] {
            params.tensor_mut(g).fill(S::one());
        }
    }
    params.tensor_mut(layout.lnf_g).fill(S::one());
    fill(&mut params, layout.lm_head, INIT_STD);
    Ok(params)
}

/// Configuration plus parameters; the unit every forward, backward and
/// saliency call works on.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<S> {
    config: ModelConfig,
    params: ParamSet<S>,
}

impl<S: Scalar> Model<S> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let params = init_params(&config, seed)?;
        Ok(Model { config, params })
    }

    /// Fails if the parameter layout does not match the config.
    pub fn from_parts(config: ModelConfig, params: ParamSet<S>) -> Result<Self, ModelError> {
        config.validate()?;
        if **params.layout() != ParamLayout::new(&config) {
            return Err(ModelError::Malformed(
                "parameter layout does not match the model config".into(),
            ));
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    pub fn convert<T: Scalar>(&self) -> Model<T> {
        Model {
            config: self.config,
            params: self.params.convert(),
        }
    }
}
