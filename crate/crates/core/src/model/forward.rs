//! Forward pass, loss, and the analytic backward pass.
//!
//! The backward pass covers two consumers: full parameter gradients for
//! pretraining, and the gradient of a target NLL with respect to a
//! residual-stream delta injected at one (layer, position) for residual
//! optimization. Both share the same cached forward.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

use super::tokenizer::TokenId;
use super::{HiddenCapture, Intervention, ModelState, Tensor};

const LN_EPS: f64 = 1e-5;

/// Accumulator for parameter gradients, keyed like the parameter map.
#[derive(Debug, Default)]
pub struct ParamGrads {
    map: BTreeMap<String, Tensor>,
}

impl ParamGrads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.map.values_mut() {
            match t {
                Tensor::Mat(m) => {
                    for v in m.data_mut() {
                        *v *= s;
                    }
                }
                Tensor::Vec(v) => {
                    for x in v.data_mut() {
                        *x *= s;
                    }
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }

    fn mat_mut(&mut self, name: &str, rows: usize, cols: usize) -> &mut Matrix {
        let entry = self
            .map
            .entry(name.to_string())
            .or_insert_with(|| Tensor::Mat(Matrix::zeros(rows, cols)));
        match entry {
            Tensor::Mat(m) => m,
            Tensor::Vec(_) => panic!("gradient kind mismatch for {name}"),
        }
    }

    fn vec_mut(&mut self, name: &str, dim: usize) -> &mut Vector {
        let entry = self
            .map
            .entry(name.to_string())
            .or_insert_with(|| Tensor::Vec(Vector::zeros(dim)));
        match entry {
            Tensor::Vec(v) => v,
            Tensor::Mat(_) => panic!("gradient kind mismatch for {name}"),
        }
    }
}

// --- primitive blocks -------------------------------------------------------

/// y = x·wᵀ + b with x (seq × in), w (out × in) → (seq × out).
fn linear(x: &Matrix, w: &Matrix, b: Option<&Vector>) -> Matrix {
    let seq = x.rows();
    let (out_dim, in_dim) = (w.rows(), w.cols());
    debug_assert_eq!(x.cols(), in_dim);
    let mut y = Matrix::zeros(seq, out_dim);
    for s in 0..seq {
        let xrow = x.row(s);
        for o in 0..out_dim {
            let wrow = w.row(o);
            let mut acc = match b {
                Some(b) => b[o],
                None => 0.0,
            };
            for (a, c) in xrow.iter().zip(wrow) {
                acc += a * c;
            }
            y.set(s, o, acc);
        }
    }
    y
}

/// dx of [`linear`]: dx = dy·w.
fn linear_backward_input(dy: &Matrix, w: &Matrix) -> Matrix {
    let seq = dy.rows();
    let in_dim = w.cols();
    let mut dx = Matrix::zeros(seq, in_dim);
    for s in 0..seq {
        let dyrow = dy.row(s);
        let dxrow = dx.row_mut(s);
        for (o, &g) in dyrow.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let wrow = w.row(o);
            for (d, c) in dxrow.iter_mut().zip(wrow) {
                *d += g * c;
            }
        }
    }
    dx
}

/// dw += dyᵀ·x.
fn accumulate_weight_grad(dy: &Matrix, x: &Matrix, dw: &mut Matrix) {
    let seq = x.rows();
    for s in 0..seq {
        let dyrow = dy.row(s);
        let xrow = x.row(s);
        for (o, &g) in dyrow.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let dwrow = dw.row_mut(o);
            for (d, a) in dwrow.iter_mut().zip(xrow) {
                *d += g * a;
            }
        }
    }
}

/// db += column sums of dy.
fn accumulate_bias_grad(dy: &Matrix, db: &mut Vector) {
    for s in 0..dy.rows() {
        for (o, &g) in dy.row(s).iter().enumerate() {
            db[o] += g;
        }
    }
}

struct NormCache {
    out: Matrix,
    xhat: Matrix,
    inv_std: Vec<f64>,
}

fn layernorm(x: &Matrix, g: &Vector, b: &Vector) -> NormCache {
    let (seq, d) = (x.rows(), x.cols());
    let mut out = Matrix::zeros(seq, d);
    let mut xhat = Matrix::zeros(seq, d);
    let mut inv_std = vec![0.0; seq];
    for s in 0..seq {
        let row = x.row(s);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        inv_std[s] = istd;
        for j in 0..d {
            let xh = (row[j] - mean) * istd;
            xhat.set(s, j, xh);
            out.set(s, j, g[j] * xh + b[j]);
        }
    }
    NormCache { out, xhat, inv_std }
}

/// dx of [`layernorm`].
fn layernorm_backward_input(dy: &Matrix, cache: &NormCache, g: &Vector) -> Matrix {
    let (seq, d) = (dy.rows(), dy.cols());
    let mut dx = Matrix::zeros(seq, d);
    for s in 0..seq {
        let dyrow = dy.row(s);
        let xhrow = cache.xhat.row(s);
        let istd = cache.inv_std[s];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            let dxh = dyrow[j] * g[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhrow[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let dxrow = dx.row_mut(s);
        for j in 0..d {
            let dxh = dyrow[j] * g[j];
            dxrow[j] = istd * (dxh - mean_dxhat - xhrow[j] * mean_dxhat_xhat);
        }
    }
    dx
}

/// dg += Σ dy⊙x̂.
fn accumulate_ln_gain_grad(dy: &Matrix, cache: &NormCache, dg: &mut Vector) {
    for s in 0..dy.rows() {
        let dyrow = dy.row(s);
        let xhrow = cache.xhat.row(s);
        for j in 0..dy.cols() {
            dg[j] += dyrow[j] * xhrow[j];
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

// --- cached forward ----------------------------------------------------------

struct LayerCache {
    ln1: NormCache,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Per-head causal attention probabilities (seq × seq, upper part zero).
    probs: Vec<Matrix>,
    ctx: Matrix,
    ln2: NormCache,
    pre: Matrix,
    keyact: Matrix,
    /// Layer output after interventions; the next layer's input.
    h_out: Matrix,
}

struct Cache {
    layers: Vec<LayerCache>,
    final_ln: NormCache,
    logits: Matrix,
}

fn validate_inputs(
    state: &ModelState,
    tokens: &[TokenId],
    interventions: &[Intervention],
    capture_spec: &[(usize, usize)],
) -> Result<()> {
    let cfg = state.config();
    if tokens.is_empty() {
        return Err(Error::Validation("forward on empty token sequence".into()));
    }
    if tokens.len() > cfg.max_seq {
        return Err(Error::SequenceOverflow {
            len: tokens.len(),
            max_seq: cfg.max_seq,
        });
    }
    for &t in tokens {
        if t as usize >= cfg.vocab_size {
            return Err(Error::OutOfRange {
                what: "token id",
                value: t as usize,
                limit: cfg.vocab_size,
            });
        }
    }
    for iv in interventions {
        if iv.layer >= cfg.layer_count {
            return Err(Error::OutOfRange {
                what: "intervention layer",
                value: iv.layer,
                limit: cfg.layer_count,
            });
        }
        if iv.position >= tokens.len() {
            return Err(Error::OutOfRange {
                what: "intervention position",
                value: iv.position,
                limit: tokens.len(),
            });
        }
        if iv.delta.dim() != cfg.d_model {
            return Err(Error::DimMismatch {
                op: "intervention",
                detail: format!("delta dim {} vs d_model {}", iv.delta.dim(), cfg.d_model),
            });
        }
    }
    for &(layer, pos) in capture_spec {
        if layer >= cfg.layer_count {
            return Err(Error::OutOfRange {
                what: "capture layer",
                value: layer,
                limit: cfg.layer_count,
            });
        }
        if pos >= tokens.len() {
            return Err(Error::OutOfRange {
                what: "capture position",
                value: pos,
                limit: tokens.len(),
            });
        }
    }
    Ok(())
}

fn run_forward(
    state: &ModelState,
    tokens: &[TokenId],
    interventions: &[Intervention],
) -> Cache {
    let cfg = state.config();
    let (seq, d) = (tokens.len(), cfg.d_model);
    let heads = cfg.head_count;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let tok_emb = state.mat("tok_emb");
    let pos_emb = state.mat("pos_emb");
    let mut x = Matrix::zeros(seq, d);
    for s in 0..seq {
        let te = tok_emb.row(tokens[s] as usize);
        let pe = pos_emb.row(s);
        let row = x.row_mut(s);
        for j in 0..d {
            row[j] = te[j] + pe[j];
        }
    }

    let mut layers = Vec::with_capacity(cfg.layer_count);
    for l in 0..cfg.layer_count {
        let ln1 = layernorm(
            &x,
            state.vec(&format!("layer{l}.ln1.g")),
            state.vec(&format!("layer{l}.ln1.b")),
        );
        let q = linear(
            &ln1.out,
            state.mat(&format!("layer{l}.attn.wq")),
            Some(state.vec(&format!("layer{l}.attn.bq"))),
        );
        let k = linear(
            &ln1.out,
            state.mat(&format!("layer{l}.attn.wk")),
            Some(state.vec(&format!("layer{l}.attn.bk"))),
        );
        let v = linear(
            &ln1.out,
            state.mat(&format!("layer{l}.attn.wv")),
            Some(state.vec(&format!("layer{l}.attn.bv"))),
        );

        let mut probs = Vec::with_capacity(heads);
        let mut ctx = Matrix::zeros(seq, d);
        for h in 0..heads {
            let off = h * dh;
            let mut p = Matrix::zeros(seq, seq);
            for s in 0..seq {
                // causal: attend only to positions 0..=s
                let qrow = &q.row(s)[off..off + dh];
                let mut scores = vec![0.0; s + 1];
                let mut maxv = f64::NEG_INFINITY;
                for t in 0..=s {
                    let krow = &k.row(t)[off..off + dh];
                    let mut acc = 0.0;
                    for (a, b) in qrow.iter().zip(krow) {
                        acc += a * b;
                    }
                    let sc = acc * scale;
                    scores[t] = sc;
                    if sc > maxv {
                        maxv = sc;
                    }
                }
                let mut denom = 0.0;
                for sc in scores.iter_mut() {
                    *sc = (*sc - maxv).exp();
                    denom += *sc;
                }
                let prow = p.row_mut(s);
                for t in 0..=s {
                    prow[t] = scores[t] / denom;
                }
                let crow = &mut ctx.row_mut(s)[off..off + dh];
                for t in 0..=s {
                    let w = prow[t];
                    let vrow = &v.row(t)[off..off + dh];
                    for (c, vv) in crow.iter_mut().zip(vrow) {
                        *c += w * vv;
                    }
                }
            }
            probs.push(p);
        }

        let attn_out = linear(
            &ctx,
            state.mat(&format!("layer{l}.attn.wo")),
            Some(state.vec(&format!("layer{l}.attn.bo"))),
        );
        let mut a = x.clone();
        for (av, ov) in a.data_mut().iter_mut().zip(attn_out.data()) {
            *av += ov;
        }

        let ln2 = layernorm(
            &a,
            state.vec(&format!("layer{l}.ln2.g")),
            state.vec(&format!("layer{l}.ln2.b")),
        );
        let pre = linear(
            &ln2.out,
            state.mat(&format!("layer{l}.mlp.w_in")),
            Some(state.vec(&format!("layer{l}.mlp.b_in"))),
        );
        let mut keyact = pre.clone();
        for kv in keyact.data_mut() {
            *kv = gelu(*kv);
        }
        let mlp_out = linear(
            &keyact,
            state.mat(&format!("layer{l}.mlp.w_out")),
            Some(state.vec(&format!("layer{l}.mlp.b_out"))),
        );
        let mut h_out = a.clone();
        for (hv, mv) in h_out.data_mut().iter_mut().zip(mlp_out.data()) {
            *hv += mv;
        }
        for iv in interventions {
            if iv.layer == l {
                let row = h_out.row_mut(iv.position);
                for (hv, dv) in row.iter_mut().zip(iv.delta.data()) {
                    *hv += dv;
                }
            }
        }

        layers.push(LayerCache {
            ln1,
            q,
            k,
            v,
            probs,
            ctx,
            ln2,
            pre,
            keyact,
            h_out,
        });
        x = layers.last().unwrap().h_out.clone();
    }

    let final_ln = layernorm(&x, state.vec("ln_f.g"), state.vec("ln_f.b"));
    let logits = linear(&final_ln.out, state.mat("unemb"), None);
    Cache {
        layers,
        final_ln,
        logits,
    }
}

// --- loss helpers ------------------------------------------------------------

/// Log-softmax value of one entry of a logits row.
fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - maxv).exp()).sum::<f64>().ln() + maxv;
    row[idx] - lse
}

/// Total NLL over (position, token) targets plus dNLL/dlogits.
fn nll_and_dlogits(logits: &Matrix, targets: &[(usize, TokenId)]) -> (f64, Matrix) {
    let mut nll = 0.0;
    let mut dlogits = Matrix::zeros(logits.rows(), logits.cols());
    for &(pos, tok) in targets {
        let row = logits.row(pos);
        let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row {
            denom += (v - maxv).exp();
        }
        let drow = dlogits.row_mut(pos);
        for (j, &v) in row.iter().enumerate() {
            drow[j] += ((v - maxv).exp()) / denom;
        }
        drow[tok as usize] -= 1.0;
        nll -= row[tok as usize] - maxv - denom.ln();
    }
    (nll, dlogits)
}

// --- backward ----------------------------------------------------------------

/// Backprop from dlogits down to the embeddings.
///
/// `tap`: record and return the residual-stream gradient at the output of
/// that (layer, position) — the gradient with respect to an injected delta.
/// `accum`: also accumulate parameter gradients (training).
fn backward(
    state: &ModelState,
    tokens: &[TokenId],
    cache: &Cache,
    dlogits: &Matrix,
    tap: Option<(usize, usize)>,
    mut accum: Option<&mut ParamGrads>,
) -> Option<Vector> {
    let cfg = state.config();
    let (seq, d) = (tokens.len(), cfg.d_model);
    let heads = cfg.head_count;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let vocab = cfg.vocab_size;

    // unembedding (no bias)
    let unemb = state.mat("unemb");
    let d_lnf_out = linear_backward_input(dlogits, unemb);
    if let Some(gr) = accum.as_deref_mut() {
        accumulate_weight_grad(dlogits, &cache.final_ln.out, gr.mat_mut("unemb", vocab, d));
    }

    // final layernorm
    let g_f = state.vec("ln_f.g");
    let mut dh_stream = layernorm_backward_input(&d_lnf_out, &cache.final_ln, g_f);
    if let Some(gr) = accum.as_deref_mut() {
        accumulate_ln_gain_grad(&d_lnf_out, &cache.final_ln, gr.vec_mut("ln_f.g", d));
        accumulate_bias_grad(&d_lnf_out, gr.vec_mut("ln_f.b", d));
    }

    let mut tap_grad = None;

    for l in (0..cfg.layer_count).rev() {
        let lc = &cache.layers[l];
        if let Some((tl, tp)) = tap {
            if tl == l {
                tap_grad = Some(Vector::from(dh_stream.row(tp).to_vec()));
            }
        }

        // MLP branch: h = a + w_out·gelu(w_in·ln2(a) + b_in) + b_out
        let w_out = state.mat(&format!("layer{l}.mlp.w_out"));
        let d_keyact = linear_backward_input(&dh_stream, w_out);
        if let Some(gr) = accum.as_deref_mut() {
            accumulate_weight_grad(
                &dh_stream,
                &lc.keyact,
                gr.mat_mut(&format!("layer{l}.mlp.w_out"), d, cfg.d_mlp),
            );
            accumulate_bias_grad(&dh_stream, gr.vec_mut(&format!("layer{l}.mlp.b_out"), d));
        }
        let mut d_pre = d_keyact;
        for (dv, pv) in d_pre.data_mut().iter_mut().zip(lc.pre.data()) {
            *dv *= gelu_deriv(*pv);
        }
        let w_in = state.mat(&format!("layer{l}.mlp.w_in"));
        let d_ln2_out = linear_backward_input(&d_pre, w_in);
        if let Some(gr) = accum.as_deref_mut() {
            accumulate_weight_grad(
                &d_pre,
                &lc.ln2.out,
                gr.mat_mut(&format!("layer{l}.mlp.w_in"), cfg.d_mlp, d),
            );
            accumulate_bias_grad(&d_pre, gr.vec_mut(&format!("layer{l}.mlp.b_in"), cfg.d_mlp));
        }
        let g2 = state.vec(&format!("layer{l}.ln2.g"));
        let d_a_from_mlp = layernorm_backward_input(&d_ln2_out, &lc.ln2, g2);
        if let Some(gr) = accum.as_deref_mut() {
            accumulate_ln_gain_grad(&d_ln2_out, &lc.ln2, gr.vec_mut(&format!("layer{l}.ln2.g"), d));
            accumulate_bias_grad(&d_ln2_out, gr.vec_mut(&format!("layer{l}.ln2.b"), d));
        }
        let mut d_a = dh_stream;
        for (av, mv) in d_a.data_mut().iter_mut().zip(d_a_from_mlp.data()) {
            *av += mv;
        }

        // attention branch: a = x + wo·ctx + bo
        let wo = state.mat(&format!("layer{l}.attn.wo"));
        let d_ctx = linear_backward_input(&d_a, wo);
        if let Some(gr) = accum.as_deref_mut() {
            accumulate_weight_grad(&d_a, &lc.ctx, gr.mat_mut(&format!("layer{l}.attn.wo"), d, d));
            accumulate_bias_grad(&d_a, gr.vec_mut(&format!("layer{l}.attn.bo"), d));
        }

        let mut d_q = Matrix::zeros(seq, d);
        let mut d_k = Matrix::zeros(seq, d);
        let mut d_v = Matrix::zeros(seq, d);
        for h in 0..heads {
            let off = h * dh;
            let p = &lc.probs[h];
            for s in 0..seq {
                let dctx_row = &d_ctx.row(s)[off..off + dh];
                let prow = p.row(s);
                let mut dprobs = vec![0.0; s + 1];
                for t in 0..=s {
                    let vrow = &lc.v.row(t)[off..off + dh];
                    let mut acc = 0.0;
                    for (a, b) in dctx_row.iter().zip(vrow) {
                        acc += a * b;
                    }
                    dprobs[t] = acc;
                    let w = prow[t];
                    if w != 0.0 {
                        let dvrow = &mut d_v.row_mut(t)[off..off + dh];
                        for (dv, a) in dvrow.iter_mut().zip(dctx_row) {
                            *dv += w * a;
                        }
                    }
                }
                let mut dot = 0.0;
                for t in 0..=s {
                    dot += dprobs[t] * prow[t];
                }
                for t in 0..=s {
                    let dscore = prow[t] * (dprobs[t] - dot);
                    if dscore == 0.0 {
                        continue;
                    }
                    let krow = &lc.k.row(t)[off..off + dh];
                    {
                        let dqrow = &mut d_q.row_mut(s)[off..off + dh];
                        for (dq, b) in dqrow.iter_mut().zip(krow) {
                            *dq += dscore * b * scale;
                        }
                    }
                    let qrow = &lc.q.row(s)[off..off + dh];
                    {
                        let dkrow = &mut d_k.row_mut(t)[off..off + dh];
                        for (dk, b) in dkrow.iter_mut().zip(qrow) {
                            *dk += dscore * b * scale;
                        }
                    }
                }
            }
        }

        let mut d_ln1_out = Matrix::zeros(seq, d);
        for (mat_name, bias_name, dmat) in
            [("wq", "bq", &d_q), ("wk", "bk", &d_k), ("wv", "bv", &d_v)]
        {
            let w = state.mat(&format!("layer{l}.attn.{mat_name}"));
            let dx = linear_backward_input(dmat, w);
            if let Some(gr) = accum.as_deref_mut() {
                accumulate_weight_grad(
                    dmat,
                    &lc.ln1.out,
                    gr.mat_mut(&format!("layer{l}.attn.{mat_name}"), d, d),
                );
                accumulate_bias_grad(dmat, gr.vec_mut(&format!("layer{l}.attn.{bias_name}"), d));
            }
            for (a, b) in d_ln1_out.data_mut().iter_mut().zip(dx.data()) {
                *a += b;
            }
        }
        let g1 = state.vec(&format!("layer{l}.ln1.g"));
        let d_x_from_ln1 = layernorm_backward_input(&d_ln1_out, &lc.ln1, g1);
        if let Some(gr) = accum.as_deref_mut() {
            accumulate_ln_gain_grad(&d_ln1_out, &lc.ln1, gr.vec_mut(&format!("layer{l}.ln1.g"), d));
            accumulate_bias_grad(&d_ln1_out, gr.vec_mut(&format!("layer{l}.ln1.b"), d));
        }

        let mut d_x = d_a;
        for (a, b) in d_x.data_mut().iter_mut().zip(d_x_from_ln1.data()) {
            *a += b;
        }
        dh_stream = d_x;
    }

    if let Some(gr) = accum {
        let d_tok = gr.mat_mut("tok_emb", vocab, d);
        for s in 0..seq {
            let drow = dh_stream.row(s);
            let trow = d_tok.row_mut(tokens[s] as usize);
            for (a, b) in trow.iter_mut().zip(drow) {
                *a += b;
            }
        }
        let d_pos = gr.mat_mut("pos_emb", cfg.max_seq, d);
        for s in 0..seq {
            let drow = dh_stream.row(s);
            let prow = d_pos.row_mut(s);
            for (a, b) in prow.iter_mut().zip(drow) {
                *a += b;
            }
        }
    }

    tap_grad
}

// --- public entry points -----------------------------------------------------

pub(super) fn forward(
    state: &ModelState,
    tokens: &[TokenId],
    interventions: &[Intervention],
    capture_spec: &[(usize, usize)],
) -> Result<(Matrix, Vec<HiddenCapture>)> {
    validate_inputs(state, tokens, interventions, capture_spec)?;
    let cache = run_forward(state, tokens, interventions);
    let captures = capture_spec
        .iter()
        .map(|&(layer, position)| {
            let lc = &cache.layers[layer];
            HiddenCapture {
                layer,
                position,
                hidden: Vector::from(lc.h_out.row(position).to_vec()),
                mlp_key: Vector::from(lc.keyact.row(position).to_vec()),
            }
        })
        .collect();
    Ok((cache.logits, captures))
}

pub(super) fn logprob_sequence(
    state: &ModelState,
    prompt: &[TokenId],
    target: &[TokenId],
    interventions: &[Intervention],
) -> Result<f64> {
    if prompt.is_empty() || target.is_empty() {
        return Err(Error::Validation(
            "logprob_sequence needs non-empty prompt and target".into(),
        ));
    }
    let mut tokens = prompt.to_vec();
    tokens.extend_from_slice(target);
    validate_inputs(state, &tokens, interventions, &[])?;
    let cache = run_forward(state, &tokens, interventions);
    let mut total = 0.0;
    for (i, &tok) in target.iter().enumerate() {
        let pos = prompt.len() - 1 + i;
        total += log_softmax_at(cache.logits.row(pos), tok as usize);
    }
    Ok(total)
}

pub(super) fn target_nll_and_delta_grad(
    state: &ModelState,
    prompt: &[TokenId],
    target: &[TokenId],
    layer: usize,
    position: usize,
    delta: &Vector,
) -> Result<(f64, Vector)> {
    if prompt.is_empty() || target.is_empty() {
        return Err(Error::Validation(
            "target_nll_and_delta_grad needs non-empty prompt and target".into(),
        ));
    }
    let mut tokens = prompt.to_vec();
    tokens.extend_from_slice(target);
    let interventions = [Intervention {
        layer,
        position,
        delta: delta.clone(),
    }];
    validate_inputs(state, &tokens, &interventions, &[])?;
    let cache = run_forward(state, &tokens, &interventions);
    let targets: Vec<(usize, TokenId)> = target
        .iter()
        .enumerate()
        .map(|(i, &tok)| (prompt.len() - 1 + i, tok))
        .collect();
    let (nll, dlogits) = nll_and_dlogits(&cache.logits, &targets);
    let grad = backward(
        state,
        &tokens,
        &cache,
        &dlogits,
        Some((layer, position)),
        None,
    )
    .expect("tap gradient present");
    Ok((nll, grad))
}

pub(super) fn sequence_nll_and_param_grads(
    state: &ModelState,
    tokens: &[TokenId],
    accum: &mut ParamGrads,
) -> Result<(f64, usize)> {
    if tokens.len() < 2 {
        return Err(Error::Validation(
            "training sequence needs at least two tokens".into(),
        ));
    }
    validate_inputs(state, tokens, &[], &[])?;
    let cache = run_forward(state, tokens, &[]);
    let targets: Vec<(usize, TokenId)> =
        (0..tokens.len() - 1).map(|i| (i, tokens[i + 1])).collect();
    let (nll, dlogits) = nll_and_dlogits(&cache.logits, &targets);
    backward(state, tokens, &cache, &dlogits, None, Some(accum));
    Ok((nll, targets.len()))
}
