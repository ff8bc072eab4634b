//! Post-norm transformer encoder with a linear classification head on the
//! `[CLS]` position.
//!
//! Each layer computes
//!
//! ```text
//! x ← LayerNorm(x + MultiHeadAttention(x))
//! x ← LayerNorm(x + FFN(x))
//! ```
//!
//! with `[PAD]` keys masked to `-inf` before the attention softmax. Token and
//! learned position embeddings are summed at the input. Columns that are
//! `[PAD]` in every row of a batch are dropped before the encoder runs; they
//! can never be attended to, so outputs for real tokens are unchanged.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, DropoutRng, Element, Tape, Tensor, Var};
use crate::tokenizer::TokenBatch;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("parameter `{name}`: expected shape {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("unexpected parameter `{0}`")]
    UnexpectedParam(String),
    #[error("parameter `{0}` contains non-finite values")]
    NonFiniteParam(String),
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("batch sequence length {found} exceeds model max_len {max_len}")]
    SequenceTooLong { found: usize, max_len: usize },
    #[error("batch has {ids} ids and {mask} mask entries for length {max_len}")]
    BatchLayout { ids: usize, mask: usize, max_len: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch has no labels")]
    MissingLabels,
    #[error("row {0} has no unmasked position")]
    EmptyRow(usize),
    #[error("{0:?} mode needs a dropout generator")]
    RngRequired(Mode),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub dropout_rate: f64,
    pub max_len: usize,
    pub n_classes: usize,
    pub activation: Activation,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: crate::tokenizer::DEFAULT_VOCAB_SIZE,
            d_model: 128,
            n_heads: 4,
            n_layers: 4,
            d_ff: 512,
            dropout_rate: 0.1,
            max_len: crate::tokenizer::DEFAULT_MAX_LEN,
            n_classes: 23,
            activation: Activation::Gelu,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return err(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_classes < 2 {
            return err(format!("n_classes must be at least 2, got {}", self.n_classes));
        }
        if self.vocab_size < 5 || self.max_len < 2 || self.d_ff == 0 {
            return err("vocab_size ≥ 5, max_len ≥ 2 and d_ff ≥ 1 are required".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return err(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(self.layer_norm_eps > 0.0) {
            return err("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    /// Every parameter name and shape in initialization order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut out = vec![
            ("embeddings.token".to_owned(), vec![self.vocab_size, d]),
            ("embeddings.position".to_owned(), vec![self.max_len, d]),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            for proj in ["q", "k", "v", "o"] {
                out.push((p(&format!("attn.{proj}.weight")), vec![d, d]));
                out.push((p(&format!("attn.{proj}.bias")), vec![d]));
            }
            out.push((p("ln1.gain"), vec![d]));
            out.push((p("ln1.bias"), vec![d]));
            out.push((p("ffn.in.weight"), vec![d, f]));
            out.push((p("ffn.in.bias"), vec![f]));
            out.push((p("ffn.out.weight"), vec![f, d]));
            out.push((p("ffn.out.bias"), vec![d]));
            out.push((p("ln2.gain"), vec![d]));
            out.push((p("ln2.bias"), vec![d]));
        }
        out.extend(head_shapes(d, self.n_classes));
        out
    }
}

fn head_shapes(d_model: usize, n_classes: usize) -> [(String, Vec<usize>); 2] {
    [
        (HEAD_WEIGHT.to_owned(), vec![d_model, n_classes]),
        (HEAD_BIAS.to_owned(), vec![n_classes]),
    ]
}

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

pub fn is_head_param(name: &str) -> bool {
    name.starts_with("head.")
}

fn init_value<T: Element>(name: &str, shape: &[usize], rng: &mut DropoutRng) -> Tensor<T> {
    if name.ends_with(".gain") {
        Tensor::full(shape, T::one())
    } else if name.ends_with(".bias") {
        Tensor::zeros(shape)
    } else {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(INIT_STD * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
    /// Dropout active at inference time for Monte Carlo sampling.
    McDropout,
}

impl Mode {
    pub fn dropout_active(self) -> bool {
        !matches!(self, Mode::Eval)
    }
}

/// Named parameter tensors for one [`ModelConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    config: ModelConfig,
    params: BTreeMap<String, Tensor<T>>,
}

/// Outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    /// `[batch, n_classes]`
    pub logits: Tensor<T>,
    /// Last-layer hidden state at the `[CLS]` position, `[batch, d_model]`.
    pub cls_hidden: Tensor<T>,
    /// Per-layer attention weights `[batch·heads, len, len]` when requested.
    pub attention: Vec<Tensor<T>>,
}

/// Tape handles for every parameter of a [`ModelState`].
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Tape handles produced by [`ModelState::forward_on_tape`].
pub struct ForwardVars {
    pub logits: Var,
    pub cls_hidden: Var,
    pub attention: Vec<Var>,
}

struct Dropper<'a> {
    rate: f64,
    rng: Option<&'a mut DropoutRng>,
}

impl Dropper<'_> {
    fn apply<T: Element>(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var, AutodiffError> {
        match &mut self.rng {
            Some(rng) if self.rate > 0.0 => tape.dropout(x, self.rate, rng),
            _ => Ok(x),
        }
    }
}

impl<T: Element> ModelState<T> {
    /// Scaled-normal weights, zero biases, unit layer-norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = DropoutRng::seed_from_u64(seed);
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let v = init_value(&name, &shape, &mut rng);
                (name, v)
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    /// Builds a state from explicit tensors, checking names, shapes and finiteness.
    pub fn from_params(config: ModelConfig, mut params: BTreeMap<String, Tensor<T>>) -> Result<Self, ModelError> {
        config.validate()?;
        let mut checked = BTreeMap::new();
        for (name, shape) in config.param_shapes() {
            let t = params
                .remove(&name)
                .ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Shape {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
            if !t.is_finite() {
                return Err(ModelError::NonFiniteParam(name));
            }
            checked.insert(name, t);
        }
        if let Some(extra) = params.into_keys().next() {
            return Err(ModelError::UnexpectedParam(extra));
        }
        Ok(Self {
            config,
            params: checked,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    /// Mutable access for optimizers; callers must keep names and shapes intact.
    pub(crate) fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Element>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Swaps in a freshly initialized head with `n_classes` outputs; encoder
    /// parameters are untouched.
    pub fn replace_head(mut self, n_classes: usize, seed: u64) -> Result<Self, ModelError> {
        if n_classes < 2 {
            return Err(ModelError::Config(format!(
                "n_classes must be at least 2, got {n_classes}"
            )));
        }
        self.config.n_classes = n_classes;
        let mut rng = DropoutRng::seed_from_u64(seed);
        for (name, shape) in head_shapes(self.config.d_model, n_classes) {
            let v = init_value(&name, &shape, &mut rng);
            self.params.insert(name, v);
        }
        Ok(self)
    }

    /// Puts every parameter on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        BoundParams { vars }
    }

    fn check_batch(&self, batch: &TokenBatch) -> Result<(usize, usize), ModelError> {
        let len = batch.max_len;
        if len == 0 || batch.ids.len() != batch.mask.len() || !batch.ids.len().is_multiple_of(len) {
            return Err(ModelError::BatchLayout {
                ids: batch.ids.len(),
                mask: batch.mask.len(),
                max_len: len,
            });
        }
        if len > self.config.max_len {
            return Err(ModelError::SequenceTooLong {
                found: len,
                max_len: self.config.max_len,
            });
        }
        let rows = batch.rows();
        if rows == 0 {
            return Err(ModelError::EmptyBatch);
        }
        if let Some(&id) = batch.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        let mut effective = 0;
        for r in 0..rows {
            let last = batch
                .row_mask(r)
                .iter()
                .rposition(|&m| m != 0)
                .ok_or(ModelError::EmptyRow(r))?;
            effective = effective.max(last + 1);
        }
        Ok((rows, effective))
    }

    /// Records the forward computation on `tape`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        batch: &TokenBatch,
        mode: Mode,
        rng: Option<&mut DropoutRng>,
        keep_attention: bool,
    ) -> Result<ForwardVars, ModelError> {
        let (b, l) = self.check_batch(batch)?;
        if mode.dropout_active() && self.config.dropout_rate > 0.0 && rng.is_none() {
            return Err(ModelError::RngRequired(mode));
        }
        let mut drop = Dropper {
            rate: if mode.dropout_active() {
                self.config.dropout_rate
            } else {
                0.0
            },
            rng,
        };
        let cfg = &self.config;
        let (d, h) = (cfg.d_model, cfg.n_heads);
        let dh = d / h;

        let mut token_ids = Vec::with_capacity(b * l);
        let mut key_valid = Vec::with_capacity(b * l);
        for r in 0..b {
            token_ids.extend(batch.row_ids(r)[..l].iter().map(|&i| i as usize));
            key_valid.extend(batch.row_mask(r)[..l].iter().map(|&m| m != 0));
        }
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();

        let tok = tape.embedding_lookup(params.get("embeddings.token"), &token_ids)?;
        let pos = tape.embedding_lookup(params.get("embeddings.position"), &positions)?;
        let mut x = tape.add(tok, pos)?;
        x = drop.apply(tape, x)?;

        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut attention = Vec::new();
        for layer in 0..cfg.n_layers {
            let p = |s: &str| params.get(&format!("layers.{layer}.{s}"));
            let linear = |tape: &mut Tape<T>, x: Var, name: &str| -> Result<Var, AutodiffError> {
                let y = tape.matmul(x, p(&format!("{name}.weight")))?;
                tape.add(y, p(&format!("{name}.bias")))
            };
            let heads = |tape: &mut Tape<T>, x: Var| -> Result<Var, AutodiffError> {
                let x = tape.reshape(x, &[b, l, h, dh])?;
                let x = tape.transpose(x, 1, 2)?;
                tape.reshape(x, &[b * h, l, dh])
            };

            let q = linear(tape, x, "attn.q")?;
            let q = tape.scale(q, scale)?;
            let q = heads(tape, q)?;
            let k = linear(tape, x, "attn.k")?;
            let k = heads(tape, k)?;
            let v = linear(tape, x, "attn.v")?;
            let v = heads(tape, v)?;

            let scores = tape.batch_matmul(q, k, true)?;
            let scores = tape.mask_keys(scores, &key_valid, h)?;
            let weights = tape.softmax(scores, 2)?;
            if keep_attention {
                attention.push(weights);
            }
            let weights = drop.apply(tape, weights)?;
            let ctx = tape.batch_matmul(weights, v, false)?;
            let ctx = tape.reshape(ctx, &[b, h, l, dh])?;
            let ctx = tape.transpose(ctx, 1, 2)?;
            let ctx = tape.reshape(ctx, &[b * l, d])?;
            let attn_out = linear(tape, ctx, "attn.o")?;
            let attn_out = drop.apply(tape, attn_out)?;
            let res = tape.add(x, attn_out)?;
            x = tape.layer_norm(res, p("ln1.gain"), p("ln1.bias"), 1, T::from_f64(cfg.layer_norm_eps))?;

            let hidden = linear(tape, x, "ffn.in")?;
            let hidden = match cfg.activation {
                Activation::Gelu => tape.gelu(hidden)?,
                Activation::Relu => tape.relu(hidden)?,
            };
            let ffn_out = linear(tape, hidden, "ffn.out")?;
            let ffn_out = drop.apply(tape, ffn_out)?;
            let res = tape.add(x, ffn_out)?;
            x = tape.layer_norm(res, p("ln2.gain"), p("ln2.bias"), 1, T::from_f64(cfg.layer_norm_eps))?;
        }

        let cls_rows: Vec<usize> = (0..b).map(|r| r * l).collect();
        let cls_hidden = tape.embedding_lookup(x, &cls_rows)?;
        let pooled = drop.apply(tape, cls_hidden)?;
        let logits = tape.matmul(pooled, params.get(HEAD_WEIGHT))?;
        let logits = tape.add(logits, params.get(HEAD_BIAS))?;
        Ok(ForwardVars {
            logits,
            cls_hidden,
            attention,
        })
    }

    /// Forward pass without gradients. `rng` is required in [`Mode::Train`] and
    /// [`Mode::McDropout`] when the dropout rate is nonzero.
    pub fn forward(
        &self,
        batch: &TokenBatch,
        mode: Mode,
        rng: Option<&mut DropoutRng>,
    ) -> Result<ForwardOutput<T>, ModelError> {
        self.forward_impl(batch, mode, rng, false)
    }

    /// Like [`ModelState::forward`] but also returns attention weights.
    pub fn forward_with_attention(
        &self,
        batch: &TokenBatch,
        mode: Mode,
        rng: Option<&mut DropoutRng>,
    ) -> Result<ForwardOutput<T>, ModelError> {
        self.forward_impl(batch, mode, rng, true)
    }

    fn forward_impl(
        &self,
        batch: &TokenBatch,
        mode: Mode,
        rng: Option<&mut DropoutRng>,
        keep_attention: bool,
    ) -> Result<ForwardOutput<T>, ModelError> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let vars = self.forward_on_tape(&mut tape, &params, batch, mode, rng, keep_attention)?;
        let attention = vars
            .attention
            .iter()
            .map(|&a| tape.value(a).cloned())
            .collect::<Result<_, _>>()?;
        Ok(ForwardOutput {
            logits: tape.value(vars.logits)?.clone(),
            cls_hidden: tape.value(vars.cls_hidden)?.clone(),
            attention,
        })
    }

    /// Mean cross-entropy against the batch labels.
    pub fn loss(&self, batch: &TokenBatch, mode: Mode, rng: Option<&mut DropoutRng>) -> Result<T, ModelError> {
        let labels = batch.labels.as_deref().ok_or(ModelError::MissingLabels)?;
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let vars = self.forward_on_tape(&mut tape, &params, batch, mode, rng, false)?;
        let loss = tape.cross_entropy(vars.logits, labels)?;
        Ok(tape.value(loss)?.data()[0])
    }

    /// Mean cross-entropy of the batch labels and the gradient of every
    /// parameter, keyed by name.
    pub fn loss_and_gradients(
        &self,
        batch: &TokenBatch,
        mode: Mode,
        rng: Option<&mut DropoutRng>,
    ) -> Result<(T, BTreeMap<String, Tensor<T>>), ModelError> {
        let labels = batch.labels.as_deref().ok_or(ModelError::MissingLabels)?;
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, true);
        let vars = self.forward_on_tape(&mut tape, &params, batch, mode, rng, false)?;
        let loss = tape.cross_entropy(vars.logits, labels)?;
        let value = tape.value(loss)?.data()[0];
        let mut grads = tape.backward(loss)?;
        let out = params
            .iter()
            .map(|(name, var)| {
                (
                    name.to_owned(),
                    grads.take(var).expect("every bound parameter has a gradient"),
                )
            })
            .collect();
        Ok((value, out))
    }
}
