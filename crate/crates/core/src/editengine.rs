//! The locate-then-edit host.
//!
//! Pipeline for a batch of edit requests:
//!
//! 1. collect per-request MLP keys at the subject's last token, averaged
//!    over prefix contexts;
//! 2. estimate the key covariance from sampled corpus text;
//! 3. optimize a residual vector delta at the final target layer so the
//!    model emits the new object (gradient descent under a norm clamp);
//! 4. assemble target vectors z = h + delta (optionally rewritten by the
//!    conflict-free unlearning pass);
//! 5. spread the updates across the target layers with the closed-form
//!    solve delta_W = R K̂ᵀ (C + K̂K̂ᵀ)⁻¹, recomputing keys and hidden
//!    states after each layer's weights change.
//!
//! ROME is the single-target-layer special case of the same engine.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::come::{self, MaskSpec, ResidualBundle};
use crate::error::{Error, Result};
use crate::model::tokenizer::{self, find_last_subsequence, TokenId};
use crate::model::{self, ModelState, Tokenizer};
use crate::numerics::{descend_projected, matmul, solve_spd, Matrix, OptimizerConfig, Vector};

/// One (s, r, o → o*) edit. `relation` is a prompt template containing
/// exactly one `{}` subject placeholder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeTriple {
    pub id: String,
    pub subject: String,
    pub relation: String,
    pub old_object: String,
    pub new_object: String,
}

impl KnowledgeTriple {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Validation("triple id is empty".into()));
        }
        if self.old_object == self.new_object {
            return Err(Error::Validation(format!(
                "request {}: old_object equals new_object ({})",
                self.id, self.old_object
            )));
        }
        render_template(&self.relation, &self.subject)?;
        Ok(())
    }

    /// The base prompt: the relation template with the subject filled in.
    pub fn base_prompt(&self) -> String {
        self.relation.replacen("{}", &self.subject, 1)
    }
}

/// Substitutes the subject into a template with exactly one placeholder.
pub fn render_template(template: &str, subject: &str) -> Result<String> {
    let count = template.matches("{}").count();
    if count != 1 {
        return Err(Error::BadTemplate(format!(
            "template must contain exactly one {{}} placeholder, found {count}: {template:?}"
        )));
    }
    Ok(template.replacen("{}", subject, 1))
}

/// Prompt material for one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    /// The base prompt x (subject filled in, object left off).
    pub base: String,
    pub paraphrases: Vec<String>,
    pub neighborhood: Vec<String>,
    /// Prefix contexts p_j; the empty prefix counts as one.
    pub prefixes: Vec<String>,
}

impl PromptSet {
    /// Prefixes with the "empty counts as one" rule applied.
    pub fn effective_prefixes(&self) -> Vec<String> {
        if self.prefixes.is_empty() {
            vec![String::new()]
        } else {
            self.prefixes.clone()
        }
    }
}

/// Word-level containment: does `text` contain `phrase` as a contiguous
/// run of whitespace-separated words?
fn contains_words(text: &str, phrase: &str) -> bool {
    let words: Vec<&str> = text.split_whitespace().collect();
    let needle: Vec<&str> = phrase.split_whitespace().collect();
    if needle.is_empty() || needle.len() > words.len() {
        return false;
    }
    words.windows(needle.len()).any(|w| w == needle)
}

/// A knowledge triple plus its prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub triple: KnowledgeTriple,
    pub prompts: PromptSet,
}

impl EditRequest {
    pub fn validate(&self) -> Result<()> {
        self.triple.validate()?;
        if !contains_words(&self.prompts.base, &self.triple.subject) {
            return Err(Error::Validation(format!(
                "request {}: base prompt does not contain the subject",
                self.triple.id
            )));
        }
        for p in &self.prompts.paraphrases {
            if !contains_words(p, &self.triple.subject) {
                return Err(Error::Validation(format!(
                    "request {}: paraphrase {p:?} does not contain the subject",
                    self.triple.id
                )));
            }
        }
        for n in &self.prompts.neighborhood {
            if contains_words(n, &self.triple.subject) {
                return Err(Error::Validation(format!(
                    "request {}: neighborhood prompt {n:?} mentions the edited subject",
                    self.triple.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    Memit,
    Rome,
    Come,
}

/// Ablations of the unlearning pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Full,
    /// Skip the outdated residual entirely (u = 0).
    NoDeltaOld,
    /// Keep delta-old but zero the common component (u = delta-old).
    NoDeltaCommon,
    /// Drop the top-p restriction (p = 100).
    NoRestriction,
}

/// Everything the edit engine needs to run one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    /// Target layers T, ascending.
    pub target_layers: Vec<usize>,
    /// Final layer l = max(T); the residual is optimized here.
    pub final_layer: usize,
    /// Covariance scale: C = lambda * (1/n) sum k kᵀ.
    pub lambda: f64,
    /// Number of sampled keys for the covariance estimate.
    pub covariance_samples: usize,
    pub opt: OptimizerConfig,
    pub mode: EditMode,
    /// Unlearning weight.
    pub alpha: f64,
    /// Top-p restriction percentage in [0, 100].
    pub top_p: f64,
    #[serde(default = "AblationMode::default_full")]
    pub ablation: AblationMode,
    /// Diagnostic: pool the top-p threshold across the whole batch instead
    /// of per request.
    #[serde(default)]
    pub pooled_mask: bool,
    /// Diagnostic: freeze keys and hidden states at their pre-edit values
    /// during spreading (exposes the telescoping of the fraction rule).
    #[serde(default)]
    pub no_key_recompute: bool,
}

impl AblationMode {
    fn default_full() -> Self {
        AblationMode::Full
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_layers.is_empty() {
            return Err(Error::Validation("target_layers is empty".into()));
        }
        let mut sorted = self.target_layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.target_layers {
            return Err(Error::Validation(
                "target_layers must be strictly ascending".into(),
            ));
        }
        let max = *self.target_layers.last().unwrap();
        if self.final_layer != max {
            return Err(Error::Validation(format!(
                "final_layer {} must equal max(target_layers) = {max}",
                self.final_layer
            )));
        }
        if self.mode == EditMode::Rome && self.target_layers.len() != 1 {
            return Err(Error::Validation(format!(
                "rome mode requires exactly one target layer, got {}",
                self.target_layers.len()
            )));
        }
        if self.lambda < 0.0 {
            return Err(Error::Validation("lambda must be >= 0".into()));
        }
        if self.covariance_samples == 0 {
            return Err(Error::Validation("covariance_samples must be >= 1".into()));
        }
        if self.alpha < 0.0 {
            return Err(Error::Validation("alpha must be >= 0".into()));
        }
        if !(0.0..=100.0).contains(&self.top_p) {
            return Err(Error::Validation(format!(
                "top_p {} outside [0, 100]",
                self.top_p
            )));
        }
        if self.ablation != AblationMode::Full && self.mode != EditMode::Come {
            return Err(Error::Validation(
                "ablation modes apply to come mode only".into(),
            ));
        }
        self.opt.validate()
    }
}

/// Per-layer pieces of one closed-form update.
#[derive(Debug, Clone)]
pub struct LayerUpdate {
    pub layer: usize,
    /// Keys, one column per request (d_mlp × N).
    pub k_hat: Matrix,
    /// Value targets, one column per request (d_model × N).
    pub v_hat: Matrix,
    /// Residuals R = V̂ − W·K̂ (d_model × N).
    pub residual: Matrix,
    /// Covariance C used for this layer (d_mlp × d_mlp).
    pub covariance: Matrix,
    /// Applied weight delta (d_model × d_mlp).
    pub delta: Matrix,
}

/// Final-layer target for one request.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetVector {
    pub request_id: String,
    /// Desired hidden state z at the final target layer.
    pub z: Vector,
    /// Measured hidden state at the final target layer (base prompt).
    pub h_l: Vector,
    /// residual = z − h_l.
    pub residual: Vector,
}

/// Per-request numbers that go into the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RequestDiagnostics {
    pub request_id: String,
    pub delta_norm: f64,
    pub delta_old_norm: Option<f64>,
    pub unlearn_norm: Option<f64>,
    pub masked_coords: Option<usize>,
    pub degenerate: Option<bool>,
    /// Mean NLL of the new object before and after residual optimization.
    pub initial_nll: f64,
    pub final_nll: f64,
}

/// What edit_batch hands to the evaluation suite.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct EditReportSkeleton {
    pub n_requests: usize,
    pub per_request: Vec<RequestDiagnostics>,
    /// Frobenius norm of the applied delta per layer.
    pub layer_delta_norms: Vec<(usize, f64)>,
    /// Full unlearning provenance, kept out of the serialized report.
    #[serde(skip)]
    pub bundles: Vec<Option<ResidualBundle>>,
    #[serde(skip)]
    pub masks: Vec<Option<MaskSpec>>,
}

// --- key extraction ----------------------------------------------------------

/// Token index of the last subject token inside `[BOS] prompt`.
pub fn subject_position(
    tok: &Tokenizer,
    prompt: &str,
    subject: &str,
    request_id: &str,
) -> Result<usize> {
    let prompt_tokens = tok.encode_prompt(prompt);
    let subject_tokens = tok.encode(subject);
    if subject_tokens.is_empty() {
        return Err(Error::SubjectNotFound {
            request_id: request_id.to_string(),
            detail: "subject is empty".into(),
        });
    }
    if subject_tokens.contains(&tokenizer::UNK) {
        return Err(Error::SubjectNotFound {
            request_id: request_id.to_string(),
            detail: format!("subject {subject:?} contains out-of-vocabulary words"),
        });
    }
    match find_last_subsequence(&prompt_tokens, &subject_tokens) {
        Some(start) => Ok(start + subject_tokens.len() - 1),
        None => Err(Error::SubjectNotFound {
            request_id: request_id.to_string(),
            detail: format!("subject {subject:?} not found in prompt {prompt:?}"),
        }),
    }
}

/// Prefix + base prompt, single space joined; empty prefix leaves the base.
pub fn join_prompt(prefix: &str, base: &str) -> String {
    let prefix = prefix.trim();
    if prefix.is_empty() {
        base.to_string()
    } else {
        format!("{prefix} {base}")
    }
}

/// Mean over prefixes of the post-GELU MLP activation at the last subject
/// token, layer `layer`.
pub fn collect_key(state: &ModelState, request: &EditRequest, layer: usize) -> Result<Vector> {
    let tok = state.tokenizer();
    let prefixes = request.prompts.effective_prefixes();
    let mut mean = Vector::zeros(state.config().d_mlp);
    for prefix in &prefixes {
        let prompt = join_prompt(prefix, &request.prompts.base);
        let pos = subject_position(tok, &prompt, &request.triple.subject, &request.triple.id)?;
        let tokens = tok.encode_prompt(&prompt);
        let (_, caps) = model::forward(state, &tokens, &[], &[(layer, pos)])?;
        mean = mean.add(&caps[0].mlp_key);
    }
    Ok(mean.scale(1.0 / prefixes.len() as f64))
}

/// Hidden state at (layer, last subject token) of the unprefixed base prompt.
pub fn collect_hidden(state: &ModelState, request: &EditRequest, layer: usize) -> Result<Vector> {
    let tok = state.tokenizer();
    let pos = subject_position(
        tok,
        &request.prompts.base,
        &request.triple.subject,
        &request.triple.id,
    )?;
    let tokens = tok.encode_prompt(&request.prompts.base);
    let (_, caps) = model::forward(state, &tokens, &[], &[(layer, pos)])?;
    Ok(caps[0].hidden.clone())
}

// --- covariance --------------------------------------------------------------

/// C = lambda · (1/n) Σ k kᵀ over an explicit key list.
pub fn covariance_from_keys<'a, I>(keys: I, lambda: f64, d_mlp: usize) -> Matrix
where
    I: IntoIterator<Item = &'a Vector>,
{
    let mut c = Matrix::zeros(d_mlp, d_mlp);
    let mut n = 0usize;
    for k in keys {
        assert_eq!(k.dim(), d_mlp, "key dim mismatch");
        for i in 0..d_mlp {
            let ki = k[i];
            if ki == 0.0 {
                continue;
            }
            let row = c.row_mut(i);
            for (j, cj) in row.iter_mut().enumerate() {
                *cj += ki * k[j];
            }
        }
        n += 1;
    }
    if n == 0 {
        return c;
    }
    c.scale(lambda / n as f64)
}

/// Keys sampled at random (sequence, position) pairs of the corpus slice;
/// one covariance per requested layer, all layers sharing the same sample
/// stream so per-layer calls with the same seed agree with the batched one.
pub fn estimate_covariances(
    state: &ModelState,
    layers: &[usize],
    sample_seqs: &[Vec<TokenId>],
    n: usize,
    lambda: f64,
    seed: u64,
) -> Result<BTreeMap<usize, Matrix>> {
    if sample_seqs.is_empty() {
        return Err(Error::Validation(
            "covariance estimation needs a non-empty sample corpus".into(),
        ));
    }
    if n == 0 {
        return Err(Error::Validation("covariance sample count must be >= 1".into()));
    }
    let d_mlp = state.config().d_mlp;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sums: BTreeMap<usize, Matrix> = layers
        .iter()
        .map(|&l| (l, Matrix::zeros(d_mlp, d_mlp)))
        .collect();
    let spec: Vec<(usize, usize)> = layers.iter().map(|&l| (l, 0)).collect();
    for _ in 0..n {
        let seq = &sample_seqs[rng.gen_range(0..sample_seqs.len())];
        if seq.is_empty() {
            return Err(Error::Validation("empty sequence in sample corpus".into()));
        }
        let pos = rng.gen_range(0..seq.len());
        let spec_here: Vec<(usize, usize)> = spec.iter().map(|&(l, _)| (l, pos)).collect();
        let (_, caps) = model::forward(state, seq, &[], &spec_here)?;
        for cap in caps {
            let sum = sums.get_mut(&cap.layer).unwrap();
            let k = &cap.mlp_key;
            for i in 0..d_mlp {
                let ki = k[i];
                if ki == 0.0 {
                    continue;
                }
                let row = sum.row_mut(i);
                for (j, cj) in row.iter_mut().enumerate() {
                    *cj += ki * k[j];
                }
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|(l, m)| (l, m.scale(lambda / n as f64)))
        .collect())
}

/// Single-layer convenience wrapper around [`estimate_covariances`].
pub fn estimate_covariance(
    state: &ModelState,
    layer: usize,
    sample_seqs: &[Vec<TokenId>],
    n: usize,
    lambda: f64,
    seed: u64,
) -> Result<Matrix> {
    Ok(estimate_covariances(state, &[layer], sample_seqs, n, lambda, seed)?
        .remove(&layer)
        .unwrap())
}

// --- residual optimization ---------------------------------------------------

/// Minimizes the mean NLL of `target_object` over prefixed prompts with a
/// residual delta added at (layer, last subject token), clamped to
/// ‖delta‖ <= clamp_factor · ‖h‖.
///
/// Passing the new object yields delta; passing the old object yields the
/// outdated residual delta'.
pub fn optimize_residual(
    state: &ModelState,
    request: &EditRequest,
    target_object: &str,
    layer: usize,
    opt: &OptimizerConfig,
) -> Result<Vector> {
    let (delta, _, _) = optimize_residual_traced(state, request, target_object, layer, opt)?;
    Ok(delta)
}

/// [`optimize_residual`] plus the objective value before and after.
pub fn optimize_residual_traced(
    state: &ModelState,
    request: &EditRequest,
    target_object: &str,
    layer: usize,
    opt: &OptimizerConfig,
) -> Result<(Vector, f64, f64)> {
    let tok = state.tokenizer();
    let target_tokens = tok.encode(target_object);
    if target_tokens.is_empty() || target_tokens.contains(&tokenizer::UNK) {
        return Err(Error::Validation(format!(
            "request {}: target object {target_object:?} is not tokenizable in the closed vocabulary",
            request.triple.id
        )));
    }

    // One (prompt tokens, subject position) pair per prefix.
    let mut contexts = Vec::new();
    for prefix in request.prompts.effective_prefixes() {
        let prompt = join_prompt(&prefix, &request.prompts.base);
        let pos = subject_position(tok, &prompt, &request.triple.subject, &request.triple.id)?;
        contexts.push((tok.encode_prompt(&prompt), pos));
    }
    let n_ctx = contexts.len() as f64;

    let h_ref = collect_hidden(state, request, layer)?;
    let max_norm = opt.clamp_factor * h_ref.norm();

    let d = state.config().d_model;
    let objective = |delta: &Vector| -> Result<(f64, Vector)> {
        let mut loss = 0.0;
        let mut grad = Vector::zeros(d);
        for (tokens, pos) in &contexts {
            let (nll, g) = model::target_nll_and_delta_grad(
                state,
                tokens,
                &target_tokens,
                layer,
                *pos,
                delta,
            )?;
            loss += nll;
            grad = grad.add(&g);
        }
        Ok((loss / n_ctx, grad.scale(1.0 / n_ctx)))
    };

    let initial_loss = objective(&Vector::zeros(d))?.0;
    let delta = descend_projected(objective, &Vector::zeros(d), opt, |x| {
        let n = x.norm();
        if n > max_norm {
            let s = max_norm / n;
            for v in x.data_mut() {
                *v *= s;
            }
        }
    })?;
    debug_assert!(delta.norm() <= max_norm * (1.0 + 1e-12));
    let final_loss = objective(&delta)?.0;
    Ok((delta, initial_loss, final_loss))
}

// --- target assembly ---------------------------------------------------------

pub(crate) struct AssembledTargets {
    pub targets: Vec<TargetVector>,
    pub bundles: Vec<Option<ResidualBundle>>,
    pub masks: Vec<Option<MaskSpec>>,
    pub diagnostics: Vec<RequestDiagnostics>,
}

pub(crate) fn assemble_targets_full(
    state: &ModelState,
    requests: &[EditRequest],
    config: &EditConfig,
) -> Result<AssembledTargets> {
    let mut targets = Vec::with_capacity(requests.len());
    let mut bundles = Vec::with_capacity(requests.len());
    let mut masks = Vec::with_capacity(requests.len());
    let mut diagnostics = Vec::with_capacity(requests.len());

    // Phase 1: per-request residuals and raw targets.
    let mut raw: Vec<(Vector, Vector, f64, f64)> = Vec::with_capacity(requests.len());
    for request in requests {
        let (delta, nll0, nll1) = optimize_residual_traced(
            state,
            request,
            &request.triple.new_object,
            config.final_layer,
            &config.opt,
        )?;
        let h_l = collect_hidden(state, request, config.final_layer)?;
        raw.push((delta, h_l, nll0, nll1));
    }

    // Phase 2: unlearning (pooled masking needs all bundles first).
    if config.mode == EditMode::Come && config.pooled_mask {
        let mut pending = Vec::with_capacity(requests.len());
        for (request, (delta, h_l, nll0, nll1)) in requests.iter().zip(&raw) {
            let z = h_l.add(delta);
            // Reuse the per-request pipeline for the bundle; mask is redone below.
            let (_, bundle, _) = come::come_transform(state, request, delta, &z, config)?;
            pending.push((request, delta, h_l, z, bundle, *nll0, *nll1));
        }
        let us: Vec<&Vector> = pending.iter().map(|(_, _, _, _, b, _, _)| &b.unlearn).collect();
        let p = match config.ablation {
            AblationMode::NoRestriction => 100.0,
            _ => config.top_p,
        };
        let pooled = come::build_masks_pooled(&us, p);
        for ((request, delta, h_l, z, bundle, nll0, nll1), mask) in
            pending.into_iter().zip(pooled)
        {
            let z_prime = come::apply_unlearning(&z, &bundle.unlearn, config.alpha, &mask);
            let residual = z_prime.sub(h_l);
            diagnostics.push(diag_for(request, delta, Some(&bundle), Some(&mask), nll0, nll1));
            targets.push(TargetVector {
                request_id: request.triple.id.clone(),
                z: z_prime,
                h_l: h_l.clone(),
                residual,
            });
            bundles.push(Some(bundle));
            masks.push(Some(mask));
        }
    } else {
        for (request, (delta, h_l, nll0, nll1)) in requests.iter().zip(&raw) {
            let z = h_l.add(delta);
            if config.mode == EditMode::Come {
                let (z_prime, bundle, mask) =
                    come::come_transform(state, request, delta, &z, config)?;
                let residual = z_prime.sub(h_l);
                diagnostics.push(diag_for(request, delta, Some(&bundle), Some(&mask), *nll0, *nll1));
                targets.push(TargetVector {
                    request_id: request.triple.id.clone(),
                    z: z_prime,
                    h_l: h_l.clone(),
                    residual,
                });
                bundles.push(Some(bundle));
                masks.push(Some(mask));
            } else {
                diagnostics.push(diag_for(request, delta, None, None, *nll0, *nll1));
                targets.push(TargetVector {
                    request_id: request.triple.id.clone(),
                    z,
                    h_l: h_l.clone(),
                    residual: delta.clone(),
                });
                bundles.push(None);
                masks.push(None);
            }
        }
    }

    Ok(AssembledTargets {
        targets,
        bundles,
        masks,
        diagnostics,
    })
}

fn diag_for(
    request: &EditRequest,
    delta: &Vector,
    bundle: Option<&ResidualBundle>,
    mask: Option<&MaskSpec>,
    initial_nll: f64,
    final_nll: f64,
) -> RequestDiagnostics {
    RequestDiagnostics {
        request_id: request.triple.id.clone(),
        delta_norm: delta.norm(),
        delta_old_norm: bundle.map(|b| b.delta_old.norm()),
        unlearn_norm: bundle.map(|b| b.unlearn.norm()),
        masked_coords: mask.map(|m| m.selected.len()),
        degenerate: bundle.map(|b| b.degenerate),
        initial_nll,
        final_nll,
    }
}

/// One target vector per request: z = h + delta, rewritten to z' by the
/// unlearning pass in come mode.
pub fn assemble_targets(
    state: &ModelState,
    requests: &[EditRequest],
    config: &EditConfig,
) -> Result<Vec<TargetVector>> {
    Ok(assemble_targets_full(state, requests, config)?.targets)
}

// --- closed-form spreading ---------------------------------------------------

/// delta_W = R K̂ᵀ (C + K̂ K̂ᵀ)⁻¹ via the SPD solver.
pub fn solve_layer_delta(residual: &Matrix, k_hat: &Matrix, covariance: &Matrix) -> Result<Matrix> {
    if residual.cols() != k_hat.cols() {
        return Err(Error::DimMismatch {
            op: "solve_layer_delta",
            detail: format!(
                "residual has {} columns, keys have {}",
                residual.cols(),
                k_hat.cols()
            ),
        });
    }
    let kkt = matmul(k_hat, &k_hat.transpose())?;
    let a = covariance.add(&kkt)?;
    let b = matmul(k_hat, &residual.transpose())?;
    let x = solve_spd(&a, &b)?;
    Ok(x.transpose())
}

/// Distributes the target residuals across the target layers.
///
/// Iterates layers ascending; at each layer the keys and the final-layer
/// hidden states are recomputed against the partially updated model, the
/// remaining residual is reduced by the fraction 1/(l − t + 1), and the
/// closed-form delta is applied. The diagnostic `no_key_recompute` flag
/// freezes keys and hidden states at their pre-edit values and tracks the
/// remaining residual explicitly instead.
pub fn spread_updates(
    state: &ModelState,
    requests: &[EditRequest],
    targets: &[TargetVector],
    covariances: &BTreeMap<usize, Matrix>,
    config: &EditConfig,
) -> Result<(ModelState, Vec<LayerUpdate>)> {
    if targets.is_empty() {
        return Err(Error::Validation("spread_updates on empty targets".into()));
    }
    if requests.len() != targets.len() {
        return Err(Error::DimMismatch {
            op: "spread_updates",
            detail: format!("{} requests vs {} targets", requests.len(), targets.len()),
        });
    }
    let l_final = config.final_layer;
    let mut current = state.clone();
    let mut updates = Vec::with_capacity(config.target_layers.len());

    // Frozen-path bookkeeping for the diagnostic mode.
    let mut frozen_keys: Option<BTreeMap<usize, Vec<Vector>>> = None;
    let mut remaining: Vec<Vector> = Vec::new();
    if config.no_key_recompute {
        let mut by_layer = BTreeMap::new();
        for &t in &config.target_layers {
            let keys: Result<Vec<Vector>> = requests
                .iter()
                .map(|r| collect_key(state, r, t))
                .collect();
            by_layer.insert(t, keys?);
        }
        frozen_keys = Some(by_layer);
        remaining = targets.iter().map(|tv| tv.residual.clone()).collect();
    }

    for &t in &config.target_layers {
        let denom = (l_final - t + 1) as f64;
        let covariance = covariances.get(&t).ok_or_else(|| {
            Error::Validation(format!("no covariance available for layer {t}"))
        })?;

        let (keys, layer_residuals): (Vec<Vector>, Vec<Vector>) = if config.no_key_recompute {
            let keys = frozen_keys.as_ref().unwrap().get(&t).unwrap().clone();
            let fracs: Vec<Vector> = remaining.iter().map(|r| r.scale(1.0 / denom)).collect();
            for (rem, f) in remaining.iter_mut().zip(&fracs) {
                *rem = rem.sub(f);
            }
            (keys, fracs)
        } else {
            let mut keys = Vec::with_capacity(requests.len());
            let mut fracs = Vec::with_capacity(requests.len());
            for (request, target) in requests.iter().zip(targets) {
                keys.push(collect_key(&current, request, t)?);
                let h_now = collect_hidden(&current, request, l_final)?;
                let rem = target.z.sub(&h_now);
                fracs.push(rem.scale(1.0 / denom));
            }
            (keys, fracs)
        };

        let k_hat = Matrix::from_columns(&keys);
        let r = Matrix::from_columns(&layer_residuals);
        let w = current.get_mlp_out_weight(t)?;
        let delta = solve_layer_delta(&r, &k_hat, covariance)?;
        let v_hat = matmul(&w, &k_hat)?.add(&r)?;
        let w_new = w.add(&delta)?;
        current = current.set_mlp_out_weight(t, w_new)?;
        updates.push(LayerUpdate {
            layer: t,
            k_hat,
            v_hat,
            residual: r,
            covariance: covariance.clone(),
            delta,
        });
    }

    Ok((current, updates))
}

// --- batch entry point ---------------------------------------------------------

/// Runs the whole pipeline on a batch. The input state is never touched;
/// any stage error aborts the batch with no partial edits visible.
pub fn edit_batch(
    state: &ModelState,
    requests: &[EditRequest],
    config: &EditConfig,
    covariance_corpus: &[Vec<TokenId>],
) -> Result<(ModelState, EditReportSkeleton)> {
    config.validate()?;
    if requests.is_empty() {
        return Err(Error::Validation("edit_batch on empty request list".into()));
    }
    let mut seen = BTreeSet::new();
    for r in requests {
        r.validate()?;
        if !seen.insert(r.triple.id.clone()) {
            return Err(Error::Validation(format!(
                "duplicate request id {}",
                r.triple.id
            )));
        }
    }
    for &t in &config.target_layers {
        if t >= state.config().layer_count {
            return Err(Error::OutOfRange {
                what: "target layer",
                value: t,
                limit: state.config().layer_count,
            });
        }
    }

    let covariances = estimate_covariances(
        state,
        &config.target_layers,
        covariance_corpus,
        config.covariance_samples,
        config.lambda,
        config.opt.seed,
    )?;
    let assembled = assemble_targets_full(state, requests, config)?;
    let (edited, layer_updates) =
        spread_updates(state, requests, &assembled.targets, &covariances, config)?;

    let skeleton = EditReportSkeleton {
        n_requests: requests.len(),
        per_request: assembled.diagnostics,
        layer_delta_norms: layer_updates
            .iter()
            .map(|u| (u.layer, u.delta.norm()))
            .collect(),
        bundles: assembled.bundles,
        masks: assembled.masks,
    };
    Ok((edited, skeleton))
}

#[cfg(test)]
mod tests;
