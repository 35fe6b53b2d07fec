//! A small decoder-only transformer with instrumented MLP blocks.
//!
//! Pre-norm GPT-style blocks with learned positional embeddings and a
//! GELU MLP. The residual stream can be perturbed additively at any
//! (layer, position) during a forward pass, and the post-GELU MLP
//! activation (the "key") plus the post-intervention residual state can
//! be captured at any (layer, position). The MLP output projection of
//! each layer is readable and writable, which is the whole editing
//! surface of the ROME/MEMIT family.
//!
//! All parameters are f64 and every operation is deterministic.

mod checkpoint;
mod forward;
pub mod tokenizer;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::ParamGrads;
pub use tokenizer::{TokenId, Tokenizer};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layer_count: usize,
    pub head_count: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layer_count == 0 {
            return Err(Error::Validation("layer_count must be >= 1".into()));
        }
        if self.head_count == 0 || self.d_model % self.head_count != 0 {
            return Err(Error::Validation(format!(
                "d_model {} must be divisible by head_count {}",
                self.d_model, self.head_count
            )));
        }
        if self.vocab_size < tokenizer::SPECIALS {
            return Err(Error::Validation(format!(
                "vocab_size {} must reserve pad/bos/eos/unk (>= {})",
                self.vocab_size,
                tokenizer::SPECIALS
            )));
        }
        if self.d_mlp == 0 || self.max_seq == 0 {
            return Err(Error::Validation("d_mlp and max_seq must be >= 1".into()));
        }
        Ok(())
    }
}

/// A named parameter: either a matrix or a vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Tensor {
    Mat(Matrix),
    Vec(Vector),
}

impl Tensor {
    pub fn as_mat(&self) -> &Matrix {
        match self {
            Tensor::Mat(m) => m,
            Tensor::Vec(_) => panic!("parameter is a vector, expected matrix"),
        }
    }

    pub fn as_vec(&self) -> &Vector {
        match self {
            Tensor::Vec(v) => v,
            Tensor::Mat(_) => panic!("parameter is a matrix, expected vector"),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Tensor::Mat(m) => m.is_finite(),
            Tensor::Vec(v) => v.is_finite(),
        }
    }
}

pub type ParamMap = BTreeMap<String, Tensor>;

/// Immutable model: config, named parameters, edit counter, vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    config: ModelConfig,
    params: ParamMap,
    version: u64,
    tokenizer: Tokenizer,
}

/// Residual-stream capture at one (layer, position).
#[derive(Debug, Clone)]
pub struct HiddenCapture {
    pub layer: usize,
    pub position: usize,
    /// Residual stream at the layer output, after interventions.
    pub hidden: Vector,
    /// Post-GELU MLP activation feeding the output projection.
    pub mlp_key: Vector,
}

/// Additive residual-stream perturbation applied during one forward pass.
#[derive(Debug, Clone)]
pub struct Intervention {
    pub layer: usize,
    pub position: usize,
    pub delta: Vector,
}

impl ModelState {
    /// Fresh random initialization (normal, sigma 0.02) seeded from the config.
    pub fn new(config: ModelConfig, tokenizer: Tokenizer) -> Result<ModelState> {
        config.validate()?;
        if tokenizer.vocab_size() != config.vocab_size {
            return Err(Error::Validation(format!(
                "tokenizer vocab {} != config vocab_size {}",
                tokenizer.vocab_size(),
                config.vocab_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let mut draw_mat = |rows: usize, cols: usize| {
            Tensor::Mat(Matrix::from_vec(
                rows,
                cols,
                (0..rows * cols).map(|_| normal.sample(&mut rng)).collect(),
            ))
        };
        let d = config.d_model;
        let mut params = ParamMap::new();
        params.insert("tok_emb".into(), draw_mat(config.vocab_size, d));
        params.insert("pos_emb".into(), draw_mat(config.max_seq, d));
        for l in 0..config.layer_count {
            for wname in ["wq", "wk", "wv", "wo"] {
                params.insert(format!("layer{l}.attn.{wname}"), draw_mat(d, d));
            }
            params.insert(format!("layer{l}.mlp.w_in"), draw_mat(config.d_mlp, d));
            params.insert(format!("layer{l}.mlp.w_out"), draw_mat(d, config.d_mlp));
        }
        params.insert("unemb".into(), draw_mat(config.vocab_size, d));
        // Zero-init biases, unit layernorm gains.
        for l in 0..config.layer_count {
            for bname in ["bq", "bk", "bv", "bo"] {
                params.insert(
                    format!("layer{l}.attn.{bname}"),
                    Tensor::Vec(Vector::zeros(d)),
                );
            }
            params.insert(
                format!("layer{l}.mlp.b_in"),
                Tensor::Vec(Vector::zeros(config.d_mlp)),
            );
            params.insert(format!("layer{l}.mlp.b_out"), Tensor::Vec(Vector::zeros(d)));
            for ln in ["ln1", "ln2"] {
                params.insert(
                    format!("layer{l}.{ln}.g"),
                    Tensor::Vec(Vector::from(vec![1.0; d])),
                );
                params.insert(format!("layer{l}.{ln}.b"), Tensor::Vec(Vector::zeros(d)));
            }
        }
        params.insert("ln_f.g".into(), Tensor::Vec(Vector::from(vec![1.0; d])));
        params.insert("ln_f.b".into(), Tensor::Vec(Vector::zeros(d)));
        Ok(ModelState {
            config,
            params,
            version: 0,
            tokenizer,
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        params: ParamMap,
        version: u64,
        tokenizer: Tokenizer,
    ) -> ModelState {
        ModelState {
            config,
            params,
            version,
            tokenizer,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    pub(crate) fn param(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub(crate) fn mat(&self, name: &str) -> &Matrix {
        self.param(name).as_mat()
    }

    pub(crate) fn vec(&self, name: &str) -> &Vector {
        self.param(name).as_vec()
    }

    /// Copy of the MLP output projection at `layer` (d_model x d_mlp).
    pub fn get_mlp_out_weight(&self, layer: usize) -> Result<Matrix> {
        if layer >= self.config.layer_count {
            return Err(Error::OutOfRange {
                what: "layer",
                value: layer,
                limit: self.config.layer_count,
            });
        }
        Ok(self.mat(&format!("layer{layer}.mlp.w_out")).clone())
    }

    /// New state with the MLP output projection at `layer` replaced and the
    /// edit counter bumped. Every other parameter is bit-identical.
    pub fn set_mlp_out_weight(&self, layer: usize, w: Matrix) -> Result<ModelState> {
        if layer >= self.config.layer_count {
            return Err(Error::OutOfRange {
                what: "layer",
                value: layer,
                limit: self.config.layer_count,
            });
        }
        if w.rows() != self.config.d_model || w.cols() != self.config.d_mlp {
            return Err(Error::DimMismatch {
                op: "set_mlp_out_weight",
                detail: format!(
                    "{}x{}, expected {}x{}",
                    w.rows(),
                    w.cols(),
                    self.config.d_model,
                    self.config.d_mlp
                ),
            });
        }
        if !w.is_finite() {
            return Err(Error::Validation(
                "set_mlp_out_weight: non-finite entries".into(),
            ));
        }
        let mut next = self.clone();
        next.params
            .insert(format!("layer{layer}.mlp.w_out"), Tensor::Mat(w));
        next.version += 1;
        Ok(next)
    }

    /// Applies in-place parameter deltas (training only; editing goes
    /// through [`ModelState::set_mlp_out_weight`]).
    pub(crate) fn apply_param_update(&mut self, name: &str, update: &Tensor) {
        let slot = self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        match (slot, update) {
            (Tensor::Mat(m), Tensor::Mat(u)) => {
                for (a, b) in m.data_mut().iter_mut().zip(u.data()) {
                    *a += b;
                }
            }
            (Tensor::Vec(v), Tensor::Vec(u)) => {
                for (a, b) in v.data_mut().iter_mut().zip(u.data()) {
                    *a += b;
                }
            }
            _ => panic!("parameter kind mismatch for {name}"),
        }
    }

    /// Names of parameters that differ from `other` (shape or value).
    pub fn param_diff(&self, other: &ModelState) -> Vec<String> {
        self.params
            .iter()
            .filter(|(name, t)| other.params.get(*name) != Some(t))
            .map(|(name, _)| name.clone())
            .collect()
    }
}

/// Causal forward pass with interventions and captures.
///
/// Captures at (layer, position) are taken after interventions at the
/// same layer have been applied. The input state is never mutated.
pub fn forward(
    state: &ModelState,
    tokens: &[TokenId],
    interventions: &[Intervention],
    capture_spec: &[(usize, usize)],
) -> Result<(Matrix, Vec<HiddenCapture>)> {
    forward::forward(state, tokens, interventions, capture_spec)
}

/// Sum of log-probabilities of `target` tokens continuing `prompt`.
///
/// Always <= 0. Interventions are applied during the underlying forward
/// pass, which makes this the objective of residual optimization.
pub fn logprob_sequence(
    state: &ModelState,
    prompt: &[TokenId],
    target: &[TokenId],
    interventions: &[Intervention],
) -> Result<f64> {
    forward::logprob_sequence(state, prompt, target, interventions)
}

/// Negative log-likelihood of `target` after `prompt` with `delta` injected
/// at (layer, position), plus the analytic gradient of that NLL w.r.t. delta.
pub fn target_nll_and_delta_grad(
    state: &ModelState,
    prompt: &[TokenId],
    target: &[TokenId],
    layer: usize,
    position: usize,
    delta: &Vector,
) -> Result<(f64, Vector)> {
    forward::target_nll_and_delta_grad(state, prompt, target, layer, position, delta)
}

/// Next-token cross-entropy over a whole sequence with parameter-gradient
/// accumulation; the training backward pass.
pub fn sequence_nll_and_param_grads(
    state: &ModelState,
    tokens: &[TokenId],
    accum: &mut ParamGrads,
) -> Result<(f64, usize)> {
    forward::sequence_nll_and_param_grads(state, tokens, accum)
}

/// Greedy decoding: argmax continuation until EOS, `max_new` tokens, or the
/// context window is exhausted. Deterministic given seed and state (greedy
/// decoding ignores the seed; it is part of the signature so sampling
/// decoders can slot in without an interface change).
pub fn generate(
    state: &ModelState,
    prompt: &[TokenId],
    max_new: usize,
    _seed: u64,
) -> Result<Vec<TokenId>> {
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        if seq.len() >= state.config.max_seq {
            break;
        }
        let (logits, _) = forward(state, &seq, &[], &[])?;
        let last = logits.row(logits.rows() - 1);
        let mut best = 0usize;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        let tok = best as TokenId;
        if tok == tokenizer::EOS {
            break;
        }
        out.push(tok);
        seq.push(tok);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
